"""The desk-scale end-to-end run shared by the acceptance and slow pipeline tests."""

import time
from dataclasses import dataclass, field

import numpy as np

from heartvit.data import DatasetSpec, generate_synthetic
from heartvit.model import TINY, ViTModel, init_model
from heartvit.pipeline import (FinetuneConfig, RunRecord, TrainConfig, calibrate, evaluate, finetune, train)
from heartvit.policy import PruningPolicy
from heartvit.sensitivity import CalibrationStats

DATA = DatasetSpec(samples_per_class=160, seed=0)
TRAIN = TrainConfig(epochs=40, patience=10, shift_aug=8, seed=0)
FINETUNE = FinetuneConfig(epochs=20, gamma0=1.0, gamma_max=50.0, seed=0)
POLICY = PruningPolicy("percentile", 0.2, 0.2)
CALIB_SIZE = 32


def splits(spec: DatasetSpec = DATA):
    """Stratified train / validation / test thirds of 40 / 20 / 40 percent."""
    full = generate_synthetic(spec)
    tr, rest = full.split(0.4, seed=1)
    va, te = rest.split(1 / 3, seed=2)
    return tr, va, te


@dataclass
class EndToEnd:
    model: ViTModel
    tuned: ViTModel
    stats: CalibrationStats
    train_acc: float
    dense_acc: float
    pruned_acc: float
    tuned_acc: float
    train_record: RunRecord
    finetune_record: RunRecord
    test: object
    seconds: dict = field(default_factory=dict)


def run_end_to_end(spec=DATA, train_cfg=TRAIN, ft_cfg=FINETUNE, policy=POLICY, seed=0) -> EndToEnd:
    t0 = time.perf_counter()
    tr, va, te = splits(spec)
    model, trec = train(init_model(TINY, seed), tr, train_cfg, val=va)
    t1 = time.perf_counter()
    calib = tr.images[np.sort(np.random.default_rng(seed).permutation(len(tr))[:CALIB_SIZE])]
    stats, _ = calibrate(model, calib, policy)
    pre = evaluate(model, te, policy, stats)
    t2 = time.perf_counter()
    tuned, frec = finetune(model, tr, policy, stats, ft_cfg, eval_set=te)
    t3 = time.perf_counter()
    return EndToEnd(model, tuned, stats, evaluate(model, tr).accuracy, pre.dense_accuracy, pre.accuracy,
                    frec.summary["accuracy"], trec, frec, te,
                    {"train": t1 - t0, "calibrate+eval": t2 - t1, "finetune": t3 - t2, "total": t3 - t0})
