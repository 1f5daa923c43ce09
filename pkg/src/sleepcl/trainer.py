"""Class-incremental training with veridical replay, generative replay and downscaling.

Per task N the loop is: snapshot the end-of-task-(N-1) model, zero the
smallest-magnitude fraction p of every trainable weight matrix, then for
each iteration draw a batch of current-task features (veridical) plus,
from task 2 on, a batch decoded from the snapshot's latent prior with the
snapshot's own soft labels (generative), and take an Adam step on

    L = L^C + L^G,  L^X = (1/N) L^X_current + (1 - 1/N) L^X_replay.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ExperimentConfig
from .data import TaskStream, load_pair, split_tasks, subsample
from .metrics import (
    MetricsRecord,
    WeightHistogram,
    weight_histogram,
    write_derived_csv,
    write_hist_csv,
    write_metrics_csv,
)
from .models import SleepModel, build_extractor, load_extractor, model_metadata, save_params
from .optim import OptimizerState, adam_step, zero_grad

log = logging.getLogger(__name__)

FIRST_ENCODER_LAYER = "encoder.fc1.weight"


class TrainingOrderError(RuntimeError):
    pass


# -- downscaling ------------------------------------------------------------------------------
@dataclass
class DownscaleConfig:
    p: float
    layers: Optional[list] = None  # None -> every weight matrix of the model (biases excluded)

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"downscale fraction must lie in [0, 1), got {self.p}")
        if self.layers is not None and self.p > 0 and not self.layers:
            raise ValueError("empty layer set with a positive downscale fraction")


def n_to_zero(p: float, n: int) -> int:
    """floor(p * n) with p read as the decimal it was written as."""
    return int(math.floor(Fraction(repr(float(p))) * n))


def downscale_array(w: np.ndarray, p: float) -> int:
    """Zero the floor(p*n) smallest-magnitude entries of ``w`` in place.

    Ties are broken by flat index, so the selection is deterministic.
    """
    k = n_to_zero(p, w.size)
    if k == 0:
        return 0
    flat = w.reshape(-1)
    order = np.argsort(np.abs(flat), kind="stable")
    flat[order[:k]] = 0
    return k


def downscale(model: SleepModel, cfg: DownscaleConfig) -> dict[str, int]:
    """Apply magnitude downscaling per layer; returns zeroed count per layer."""
    params = model.parameters()
    names = cfg.layers if cfg.layers is not None else model.weight_names()
    if cfg.p > 0 and not names:
        raise ValueError("no layers to downscale")
    counts = {}
    for name in names:
        if name not in params:
            raise KeyError(f"unknown layer {name!r}")
        counts[name] = downscale_array(params[name].data, cfg.p)
    return counts


# -- replay batches --------------------------------------------------------------------------
@dataclass
class ReplayBatch:
    features: np.ndarray
    targets: np.ndarray  # int labels (veridical) or probability rows (generative)
    kind: str

    def __post_init__(self):
        if self.kind not in ("veridical", "generative"):
            raise ValueError(f"unknown replay kind {self.kind!r}")
        if len(self.features) != len(self.targets):
            raise ValueError("features and targets differ in length")
        if self.kind == "generative":
            check_distribution(self.targets)

    def __len__(self) -> int:
        return len(self.features)


def check_distribution(rows: np.ndarray, tol: float = 1e-4) -> None:
    rows = np.asarray(rows)
    if rows.ndim != 2 or (rows < 0).any() or not np.allclose(rows.sum(axis=1), 1.0, atol=tol):
        raise ValueError("soft targets must be non-negative rows summing to 1")


@dataclass(frozen=True)
class FrozenSnapshot:
    model: SleepModel
    tasks_seen: int
    class_mask: np.ndarray

    @classmethod
    def capture(cls, model: SleepModel, tasks_seen: int, class_mask: np.ndarray) -> "FrozenSnapshot":
        snap = model.copy()
        for p in snap.parameters().values():
            p.requires_grad = False
            p.grad = None
            p.data.flags.writeable = False
        return cls(snap, tasks_seen, np.array(class_mask, dtype=bool))


def generate_replay(snapshot: Optional[FrozenSnapshot], batch_size: int,
                    rng: np.random.Generator) -> ReplayBatch:
    """Decode standard-normal latents through the snapshot and label them with it."""
    if snapshot is None or snapshot.tasks_seen < 1:
        raise TrainingOrderError("generative replay needs a snapshot of a previous task (task >= 2)")
    m = snapshot.model
    dtype = m.parameters()[FIRST_ENCODER_LAYER].dtype
    z = rng.standard_normal((batch_size, m.cfg.latent)).astype(dtype)
    with ad.no_grad():
        h_hat = m.decode(Tensor(z, dtype=dtype))
        pen, _, _ = m.encode(h_hat)
        y_hat = m.classify(pen, snapshot.class_mask)
    return ReplayBatch(h_hat.data.copy(), y_hat.data.copy(), "generative")


def veridical_batch(features: np.ndarray, labels: np.ndarray, batch_size: int,
                    rng: np.random.Generator, extractor=None) -> ReplayBatch:
    """Uniform minibatch of current-task examples with hard labels.

    ``features`` may be raw images when ``extractor`` is given.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("current task has no training data")
    idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    x = features[idx]
    if extractor is not None:
        x = extractor(x).data
    return ReplayBatch(np.asarray(x), np.asarray(labels)[idx], "veridical")


# -- losses ------------------------------------------------------------------------------------
def loss_weights(task: int, replay: bool) -> tuple[float, float]:
    if task < 1:
        raise ValueError("task index starts at 1")
    if not replay or task == 1:
        return 1.0, 0.0
    return 1.0 / task, 1.0 - 1.0 / task


def soften(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Re-temper a softmax output: p^(1/T) renormalised equals softmax(logits / T)."""
    with np.errstate(divide="ignore"):
        logp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), -np.inf) / temperature
    logp -= logp.max(axis=1, keepdims=True)
    q = np.exp(logp)
    return q / q.sum(axis=1, keepdims=True)


@dataclass
class LossBundle:
    total: Tensor
    classifier: float
    generator: float
    classifier_current: float
    classifier_replay: Optional[float]
    generator_current: float
    generator_replay: Optional[float]
    weights: tuple


def _encode(model: SleepModel, batch: ReplayBatch, dtype) -> tuple:
    return model.encode(Tensor(batch.features, dtype=dtype))


def classifier_loss(model: SleepModel, veridical: ReplayBatch, generative: Optional[ReplayBatch],
                    task: int, active_mask: np.ndarray, temperature: float = 2.0,
                    encoded: Optional[dict] = None, dtype=None):
    """Weighted cross-entropy on current labels + T^2-scaled distillation on replay."""
    dtype = dtype or model.parameters()[FIRST_ENCODER_LAYER].dtype
    encoded = encoded or {}
    w_cur, w_rep = loss_weights(task, generative is not None)
    pen = encoded.get("veridical") or _encode(model, veridical, dtype)
    current = ad.cross_entropy(model.logits(pen[0]), veridical.targets, active_mask)
    parts = {"current": current.item(), "replay": None}
    if generative is None:
        return current, parts
    check_distribution(generative.targets)
    gpen = encoded.get("generative") or _encode(model, generative, dtype)
    targets = soften(generative.targets, temperature)
    replay = ad.soft_cross_entropy(model.logits(gpen[0]), targets, active_mask, temperature)
    parts["replay"] = replay.item()
    return ad.add(ad.scale(current, w_cur), ad.scale(replay, w_rep)), parts


def latent_divergence(mu: Tensor, log_var: Tensor) -> Tensor:
    """Batch mean of 0.5 * sum(exp(lv) + mu^2 - 1 - lv), KL to the standard normal."""
    inner = ad.sub(ad.add(ad.exp(log_var), ad.square(mu)), ad.add(log_var, 1.0))
    return ad.scale(ad.mean(ad.sum_(inner, axis=1)), 0.5)


def vae_loss(model: SleepModel, x: np.ndarray, encoded, noise: np.ndarray, kl_weight: float) -> tuple[Tensor, float, float]:
    _, mu, lv = encoded
    z = ad.gaussian_sample(mu, lv, noise)
    recon = model.decode(z)
    target = Tensor(x, dtype=recon.dtype)
    rec = ad.mean(ad.square(ad.sub(recon, target)))
    kl = latent_divergence(mu, lv)
    return ad.add(rec, ad.scale(kl, kl_weight)), rec.item(), kl.item()


def generator_loss(model: SleepModel, veridical: ReplayBatch, generative: Optional[ReplayBatch],
                   task: int, rng: np.random.Generator, kl_weight: float,
                   encoded: Optional[dict] = None, dtype=None):
    """Weighted VAE objective on current features and on generated features."""
    dtype = dtype or model.parameters()[FIRST_ENCODER_LAYER].dtype
    encoded = encoded or {}
    w_cur, w_rep = loss_weights(task, generative is not None)
    enc = encoded.get("veridical") or _encode(model, veridical, dtype)
    noise = rng.standard_normal(enc[1].shape).astype(dtype)
    current, _, _ = vae_loss(model, veridical.features, enc, noise, kl_weight)
    parts = {"current": current.item(), "replay": None}
    if generative is None:
        return current, parts
    genc = encoded.get("generative") or _encode(model, generative, dtype)
    gnoise = rng.standard_normal(genc[1].shape).astype(dtype)
    replay, _, _ = vae_loss(model, generative.features, genc, gnoise, kl_weight)
    parts["replay"] = replay.item()
    return ad.add(ad.scale(current, w_cur), ad.scale(replay, w_rep)), parts


def total_loss(model: SleepModel, veridical: ReplayBatch, generative: Optional[ReplayBatch], task: int,
               active_mask: np.ndarray, rng: np.random.Generator, temperature: float,
               kl_weight: float) -> LossBundle:
    dtype = model.parameters()[FIRST_ENCODER_LAYER].dtype
    encoded = {"veridical": _encode(model, veridical, dtype)}
    if generative is not None:
        encoded["generative"] = _encode(model, generative, dtype)
    lc, cparts = classifier_loss(model, veridical, generative, task, active_mask, temperature, encoded, dtype)
    lg, gparts = generator_loss(model, veridical, generative, task, rng, kl_weight, encoded, dtype)
    total = ad.add(lc, lg)
    if not np.isfinite(total.data):
        raise ad.NonFiniteError(f"task {task}: non-finite loss (L^C={lc.item()}, L^G={lg.item()})")
    return LossBundle(total, lc.item(), lg.item(), cparts["current"], cparts["replay"],
                      gparts["current"], gparts["replay"], loss_weights(task, generative is not None))


# -- evaluation ----------------------------------------------------------------------------------
def evaluate(model: SleepModel, stream: TaskStream, task: int, test_features: np.ndarray,
             eval_limit: Optional[int] = None, seed: int = 0) -> tuple:
    """a_N^C for C = 1..N: top-1 accuracy on each class set, masked to classes seen so far."""
    mask = stream.seen_mask(task)
    dtype = model.parameters()[FIRST_ENCODER_LAYER].dtype
    accs = []
    with ad.no_grad():
        for c in range(1, task + 1):
            idx = subsample(stream[c].test_idx, eval_limit, seed + c)
            pen, _, _ = model.encode(Tensor(test_features[idx], dtype=dtype))
            logits = np.where(mask, model.logits(pen).data, -np.inf)
            pred = logits.argmax(axis=1)
            accs.append(float((pred == stream.test.labels[idx]).mean()))
    return tuple(accs)


# -- training loop ---------------------------------------------------------------------------------
@dataclass
class TrainSettings:
    iterations: int
    batch_size: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    temperature: float = 2.0
    kl_weight: float = 1.0 / 1024
    eval_every: int = 50
    eval_limit: Optional[int] = None
    rem: bool = True
    p: float = 0.0
    replay_mode: str = "continuous"
    pool_size: int = 10000
    snapshot_before_downscale: bool = True
    reset_optimizer: bool = True
    hist_bins: int = 64

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, p: float, rem: bool) -> "TrainSettings":
        t = cfg.train
        return cls(iterations=t.iterations, batch_size=t.batch_size, lr=t.lr, beta1=t.beta1,
                   beta2=t.beta2, eps=t.eps, temperature=t.temperature, kl_weight=t.kl_weight,
                   eval_every=t.eval_every, eval_limit=cfg.data.eval_limit, rem=rem, p=p,
                   replay_mode=t.replay_mode, pool_size=t.pool_size,
                   snapshot_before_downscale=t.snapshot_before_downscale,
                   reset_optimizer=t.reset_optimizer, hist_bins=t.hist_bins)

    def eval_iterations(self) -> set:
        its = set(range(self.eval_every, self.iterations + 1, self.eval_every))
        its.update({1, self.iterations, self.iterations // 2})
        its.discard(0)
        return its


@dataclass
class TrainerState:
    """Everything carried between tasks of one run."""

    seed: int
    fingerprint: str = ""
    tasks_done: int = 0
    optimizer: Optional[OptimizerState] = None
    snapshot: Optional[FrozenSnapshot] = None
    histograms: list = field(default_factory=list)
    downscale_log: list = field(default_factory=list)
    batch_rng: np.random.Generator = None
    replay_rng: np.random.Generator = None
    noise_rng: np.random.Generator = None

    def __post_init__(self):
        ss = np.random.SeedSequence(self.seed)
        b, r, n = ss.spawn(3)
        self.batch_rng = np.random.default_rng(b)
        self.replay_rng = np.random.default_rng(r)
        self.noise_rng = np.random.default_rng(n)


def _capture_hists(model: SleepModel, names, task: int, iteration: int, bins: int) -> list[WeightHistogram]:
    params = model.parameters()
    return [weight_histogram(params[n].data, n, bins, task, iteration) for n in names]


def train_task(model: SleepModel, stream: TaskStream, task: int, settings: TrainSettings,
               state: TrainerState, train_features: np.ndarray, test_features: np.ndarray,
               callback: Optional[Callable[[int, SleepModel], None]] = None) -> list[MetricsRecord]:
    """Train one task and return its evaluation records.

    ``callback(iteration, model)`` runs after every optimizer step.
    """
    if task != state.tasks_done + 1:
        raise TrainingOrderError(f"task {task} requested but {state.tasks_done} tasks are done")
    s = settings
    params = model.parameters()
    weight_names = model.weight_names()

    replaying = s.rem and task >= 2
    prev_mask = stream.seen_mask(task - 1) if task >= 2 else None
    if replaying and s.snapshot_before_downscale:
        state.snapshot = FrozenSnapshot.capture(model, task - 1, prev_mask)

    pre = {n: np.abs(params[n].data).copy() for n in weight_names}
    counts = downscale(model, DownscaleConfig(s.p))
    for n in weight_names:
        pct = float(np.percentile(pre[n], 100.0 * s.p))
        state.downscale_log.append((task, n, pre[n].size, counts[n], pct))
    state.histograms += _capture_hists(model, weight_names, task, 0, s.hist_bins)

    if replaying and not s.snapshot_before_downscale:
        state.snapshot = FrozenSnapshot.capture(model, task - 1, prev_mask)
    if not replaying:
        state.snapshot = None

    if state.optimizer is None or s.reset_optimizer:
        state.optimizer = OptimizerState(lr=s.lr, beta1=s.beta1, beta2=s.beta2, eps=s.eps)

    pool = None
    if replaying and s.replay_mode == "pooled":
        pool = generate_replay(state.snapshot, s.pool_size, state.replay_rng)

    cur = stream[task]
    feats = train_features[cur.train_idx]
    labels = stream.train.labels[cur.train_idx]
    active = stream.seen_mask(task)
    evals = s.eval_iterations()
    records = []
    for it in range(1, s.iterations + 1):
        ver = veridical_batch(feats, labels, s.batch_size, state.batch_rng)
        gen = None
        if replaying:
            if pool is not None:
                j = state.replay_rng.choice(len(pool), size=s.batch_size, replace=False)
                gen = ReplayBatch(pool.features[j], pool.targets[j], "generative")
            else:
                gen = generate_replay(state.snapshot, s.batch_size, state.replay_rng)
        bundle = total_loss(model, ver, gen, task, active, state.noise_rng, s.temperature, s.kl_weight)
        zero_grad(params)
        ad.backward(bundle.total)
        adam_step(params, state.optimizer)
        if callback is not None:
            callback(it, model)
        if it in evals:
            accs = evaluate(model, stream, task, test_features, s.eval_limit, seed=state.seed)
            records.append(MetricsRecord(task, it, accs, state.seed, state.fingerprint))
            state.histograms += _capture_hists(model, [FIRST_ENCODER_LAYER], task, it, s.hist_bins)
            log.debug("task %d it %d loss %.4f acc %s", task, it, bundle.total.item(), accs)
    state.histograms += [h for h in _capture_hists(model, weight_names, task, s.iterations, s.hist_bins)
                         if h.layer != FIRST_ENCODER_LAYER]
    state.tasks_done = task
    return records


# -- one experiment cell ------------------------------------------------------------------------------
def prepare_stream(cfg: ExperimentConfig) -> tuple[TaskStream, object]:
    """Load the dataset, split it into tasks and build the frozen extractor."""
    if not cfg.data.path:
        raise FileNotFoundError("no dataset path configured")
    train, test = load_pair(cfg.data.variant, cfg.data.path, channels=cfg.data.channels)
    stream = split_tasks(train, test, cfg.data.tasks, cfg.data.classes_per_task,
                         seed=cfg.data.class_seed, shuffle=cfg.data.shuffle_classes)
    mc = cfg.model_config()
    if mc.image_shape != train.image_shape:
        raise ValueError(f"dataset images are {train.image_shape}, model expects {mc.image_shape}")
    if mc.extractor == "conv":
        if not cfg.model.extractor_path or not Path(cfg.model.extractor_path).exists():
            raise FileNotFoundError("conv extractor requested but model.extractor_path is missing; run `pretrain`")
        extractor = load_extractor(cfg.model.extractor_path)
    else:
        extractor = build_extractor(mc)
    return stream, extractor


def extract_all(extractor, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [extractor(images[i:i + chunk]).data for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.empty((0,))


@dataclass
class CellResult:
    records: list
    histograms: list
    downscale_log: list
    model: SleepModel
    seconds: float


def run_cell(cfg: ExperimentConfig, p: float, rem: bool, seed: int, stream: Optional[TaskStream] = None,
             extractor=None, fingerprint: str = "", callback=None) -> CellResult:
    """Train all tasks in order for one (p, REM, seed) setting, in memory."""
    t0 = time.perf_counter()
    dtype = np.float64 if cfg.train.precision == "float64" else np.float32
    with ad.default_dtype(dtype):
        if stream is None:
            stream, extractor = prepare_stream(cfg)
        train_features = extract_all(extractor, stream.train.images).astype(dtype)
        test_features = extract_all(extractor, stream.test.images).astype(dtype)
        model = SleepModel(cfg.model_config(), seed=seed, dtype=dtype)
        settings = TrainSettings.from_config(cfg, p, rem)
        state = TrainerState(seed=seed, fingerprint=fingerprint)
        records = []
        for n in range(1, len(stream) + 1):
            cb = (lambda it, m, n=n: callback(n, it, m)) if callback else None
            records += train_task(model, stream, n, settings, state, train_features, test_features, cb)
    return CellResult(records, state.histograms, state.downscale_log, model, time.perf_counter() - t0)


def cell_name(p: float, rem: bool, seed: int) -> str:
    return f"{p:g}_{'rem' if rem else 'norem'}_{seed}"


def run_experiment(cfg: ExperimentConfig, p: float, rem: bool, seed: int, out_dir,
                   stream: Optional[TaskStream] = None, extractor=None) -> Path:
    """Run one cell and persist its artifacts; ``cell.json`` is written last as the completion marker."""
    fp = cfg.fingerprint()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logfile = out / "log.txt"
    handler = logging.FileHandler(logfile, mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("sleepcl").addHandler(handler)
    try:
        log.info("cell p=%g rem=%s seed=%d fingerprint=%s", p, rem, seed, fp)
        res = run_cell(cfg, p, rem, seed, stream, extractor, fingerprint=fp)
        write_metrics_csv(out / "metrics.csv", res.records, p, rem)
        write_derived_csv(out / "derived.csv", res.records, p, rem)
        write_hist_csv(out / "hist.csv", res.histograms)
        with open(out / "downscale.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "layer", "n", "zeroed", "percentile"])
            for row in res.downscale_log:
                w.writerow([row[0], row[1], row[2], row[3], repr(row[4])])
        meta = model_metadata(res.model)
        meta.update(fingerprint=fp, seed=seed, p=p, rem_enabled=rem)
        save_params(out / "params.bin", res.model, meta)
        log.info("finished in %.1fs", res.seconds)
        (out / "cell.json").write_text(json.dumps(
            {"fingerprint": fp, "seed": seed, "p": p, "rem_enabled": rem, "status": "complete"},
            sort_keys=True))
    finally:
        logging.getLogger("sleepcl").removeHandler(handler)
        handler.close()
    return out
