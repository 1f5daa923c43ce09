"""Pretraining of the convolutional feature extractor on a separate labelled dataset."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LabeledDataset
from .models import ConvFeatureExtractor, Linear
from .optim import OptimizerState, adam_step, zero_grad

log = logging.getLogger(__name__)


def classification_accuracy(extractor: ConvFeatureExtractor, head: Linear, ds: LabeledDataset,
                            chunk: int = 256) -> float:
    correct = 0
    with ad.no_grad():
        for i in range(0, len(ds), chunk):
            feats = extractor.forward(Tensor(ds.images[i:i + chunk]))
            pred = head(feats).data.argmax(axis=1)
            correct += int((pred == ds.labels[i:i + chunk]).sum())
    return correct / max(len(ds), 1)


def pretrain_extractor(train: LabeledDataset, test: Optional[LabeledDataset] = None,
                       channels=(16, 32, 64, 128, 256), strides=(1, 2, 2, 2, 2), epochs: int = 10,
                       batch_size: int = 128, lr: float = 1e-3, seed: int = 0):
    """Train conv stack + throwaway linear head with cross-entropy, then freeze the stack.

    Returns ``(frozen_extractor, test_accuracy)``; accuracy is None without a test set.
    """
    rng = np.random.default_rng(seed)
    extractor = ConvFeatureExtractor(train.image_shape, channels, strides, rng)
    with ad.no_grad():
        n_feat = extractor.forward(Tensor(train.images[:1])).shape[1]
    head = Linear(n_feat, train.class_count, rng)
    params = dict(extractor.parameters())
    params["head.weight"], params["head.bias"] = head.weight, head.bias
    opt = OptimizerState(lr=lr)
    n = len(train)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            logits = head(extractor.forward(Tensor(train.images[idx])))
            loss = ad.cross_entropy(logits, train.labels[idx])
            zero_grad(params)
            ad.backward(loss)
            adam_step(params, opt)
            total += loss.item() * len(idx)
        log.info("pretrain epoch %d loss %.4f", epoch + 1, total / n)
    acc = classification_accuracy(extractor, head, test) if test is not None else None
    extractor.freeze()
    return extractor, acc
