"""Python access to the whatifts engine."""

import json

from ._whatifts import (
    CheckpointError,
    DataError,
    Forecaster,
    NoiseSchedule,
    UsageError,
    checkpoint_id,
    generate_synth,
    mae_mse,
    split_tokens,
)
from . import _whatifts as _core

__all__ = [
    "CheckpointError",
    "DataError",
    "Forecaster",
    "NoiseSchedule",
    "UsageError",
    "build_vocab",
    "checkpoint_id",
    "construct_counterfactual",
    "dataset_info",
    "evaluate",
    "generate_synth",
    "mae_mse",
    "split_tokens",
    "tokenize",
    "train",
    "train_dttc",
]


def dataset_info(path):
    return json.loads(_core.dataset_info(str(path)))


def build_vocab(corpus, min_freq=1, max_tokens=64):
    return json.loads(_core.build_vocab(list(corpus), min_freq, max_tokens))


def tokenize(text, vocab, max_tokens=64):
    return _core.tokenize(text, json.dumps(vocab), max_tokens)


def train(data, out, config=None):
    return json.loads(_core.train(str(data), json.dumps(config or {}), str(out)))


def train_dttc(data, out, config=None):
    return json.loads(_core.train_dttc(str(data), json.dumps(config or {}), str(out)))


def evaluate(ckpt, dttc, data, setting="factual", num_samples=1, limit=0, seed=0, use_attribution=True):
    return json.loads(
        _core.evaluate(str(ckpt), str(dttc), str(data), setting, num_samples, limit, seed, use_attribution)
    )


def construct_counterfactual(data, dttc, out, M=10, seed=0):
    """Writes the counterfactual dataset and returns the recheck agreement fraction."""
    return _core.construct_counterfactual(str(data), str(dttc), M, seed, str(out))
