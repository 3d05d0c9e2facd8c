"""Learning in place of iterative optimization: train dense networks to
mimic WMMSE power control and Hungarian assignment from solver-generated
labels, or to maximize the network objective directly with no labels at all.

Pipelines here are deliberately small and deterministic: every dataset
records the generator name, seed, and instance config needed to rebuild it
bit for bit, and every trainer derives all randomness from one seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    LossSpec,
    Mlp,
    backward,
    evaluate_loss,
    forward,
    make_optimizer,
    mlp_init,
    apply_update,
)
from .optim import Assignment, hungarian, sum_rate, wmmse_power

log = logging.getLogger(__name__)

DATASET_MAGIC = "WRADS1"


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class LabeledDataset:
    """Solver-labeled training data plus the recipe that produced it.

    inputs is (n, d_in) float; labels is (n, d_out) float for regression or
    (n,) int class indices. provenance must contain everything needed to
    regenerate the arrays bit-identically (generator, seed, sizes, ...).
    """

    inputs: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a (n_samples, width) matrix")
        if len(self.inputs) != len(self.labels):
            raise ValueError(
                f"{len(self.inputs)} inputs vs {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.inputs)


def dataset_hash(ds: LabeledDataset) -> str:
    """sha256 over the raw arrays and the sorted provenance items."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.inputs).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    h.update(json.dumps(ds.provenance, sort_keys=True).encode())
    return h.hexdigest()


def save_dataset(ds: LabeledDataset, path) -> None:
    """One JSON header line, then little-endian float64 rows of
    [input | label]. Class labels are stored as floats and restored from the
    header's label kind.
    """
    classes = np.issubdtype(ds.labels.dtype, np.integer)
    lab = ds.labels[:, None] if ds.labels.ndim == 1 else ds.labels
    header = {
        "n": len(ds),
        "d_in": ds.inputs.shape[1],
        "d_out": lab.shape[1],
        "flat_labels": ds.labels.ndim == 1,
        "labels": "class" if classes else "vector",
        "provenance": ds.provenance,
    }
    rows = np.hstack([ds.inputs, lab.astype(float)]).astype("<f8")
    with open(path, "wb") as f:
        f.write(f"{DATASET_MAGIC} {json.dumps(header, sort_keys=True)}\n".encode())
        f.write(rows.tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as f:
        head = f.readline().decode()
        blob = f.read()
    magic, _, payload = head.partition(" ")
    if magic != DATASET_MAGIC:
        raise ValueError(f"not a dataset file: bad magic {magic!r}")
    meta = json.loads(payload)
    n, d_in, d_out = meta["n"], meta["d_in"], meta["d_out"]
    rows = np.frombuffer(blob, dtype="<f8").reshape(n, d_in + d_out)
    inputs = rows[:, :d_in].copy()
    labels = rows[:, d_in:].copy()
    if meta["labels"] == "class":
        labels = labels.astype(int)
    if meta["flat_labels"]:
        labels = labels[:, 0]
    return LabeledDataset(inputs, labels, meta["provenance"])


def split_dataset(ds: LabeledDataset, val_frac=0.1, seed=0):
    """Deterministic train/val split: a seeded permutation, val at the end."""
    if not 0.0 < val_frac < 1.0:
        raise ValueError("val_frac must be in (0, 1)")
    idx = np.random.default_rng(seed).permutation(len(ds))
    n_val = max(1, int(round(val_frac * len(ds))))
    tr, va = idx[:-n_val], idx[-n_val:]
    prov = dict(ds.provenance, split_seed=seed, val_frac=val_frac)
    return (
        LabeledDataset(ds.inputs[tr], ds.labels[tr], dict(prov, part="train")),
        LabeledDataset(ds.inputs[va], ds.labels[va], dict(prov, part="val")),
    )


# ---------------------------------------------------------------------------
# WMMSE mimicry (labels from the solver)


def sample_rayleigh_gains(n_links: int, rng) -> np.ndarray:
    """iid unit-mean Rayleigh power gains: |CN(0,1)|^2 entrywise."""
    re = rng.standard_normal((n_links, n_links))
    im = rng.standard_normal((n_links, n_links))
    return (re**2 + im**2) / 2.0


def gain_features(gains) -> np.ndarray:
    # raw gains span orders of magnitude; log compresses without sign issues
    return np.log10(1.0 + np.asarray(gains, dtype=float)).ravel()


def gen_power_dataset(
    n_links: int, n_samples: int, seed=0, noise=1.0, p_max=1.0
) -> LabeledDataset:
    """Draw Rayleigh interference channels and label each with the WMMSE
    power vector (normalized by p_max). Non-converged solves are dropped and
    logged; the survivors keep their draw order so regeneration is exact.
    """
    if n_links < 1 or n_samples < 1:
        raise ValueError("n_links and n_samples must be positive")
    rng = np.random.default_rng(seed)
    inputs, labels = [], []
    rejected = 0
    for _ in range(n_samples):
        g = sample_rayleigh_gains(n_links, rng)
        sol = wmmse_power(g, p_max=p_max, noise=noise)
        if not sol.converged:
            rejected += 1
            log.warning("wmmse did not converge, rejecting sample")
            continue
        inputs.append(gain_features(g))
        labels.append(sol.powers.powers / p_max)
    prov = {
        "generator": "wmmse_power",
        "seed": int(seed),
        "n_links": int(n_links),
        "n_samples": int(n_samples),
        "noise": noise,
        "p_max": p_max,
        "rejected": rejected,
    }
    return LabeledDataset(np.array(inputs), np.array(labels), prov)


@dataclass
class FitResult:
    model: Mlp
    history: dict  # per-epoch train/val losses and friends


def train_supervised(
    dataset: LabeledDataset,
    hidden=(64, 64),
    epochs=60,
    lr=1e-3,
    batch=64,
    seed=0,
    val_frac=0.1,
) -> FitResult:
    """MSE regression onto the normalized solver powers.

    Sigmoid output head, so predictions always live in (0, 1): clamping to
    the power box is built into the architecture. The val split never
    touches the gradient.
    """
    train_ds, val_ds = split_dataset(dataset, val_frac, seed)
    d_in = dataset.inputs.shape[1]
    d_out = dataset.labels.shape[1]
    net = mlp_init((d_in, *hidden, d_out), activation="relu-sigmoid", seed=seed)
    opt = make_optimizer("adam", lr, net)
    rng = np.random.default_rng(seed + 1)
    spec = LossSpec("mse")

    hist = {"train_mse": [], "val_mse": []}
    for _ in range(epochs):
        order = rng.permutation(len(train_ds))
        losses = []
        for lo in range(0, len(order), batch):
            sel = order[lo : lo + batch]
            x, y = train_ds.inputs[sel], train_ds.labels[sel]
            trace = forward(net, x)
            value, d_out_grad = evaluate_loss(spec, trace.output, y)
            grads = backward(net, trace, d_out_grad)
            net, opt = apply_update(net, grads, opt)
            losses.append(value)
        hist["train_mse"].append(float(np.mean(losses)))
        val_loss, _ = evaluate_loss(spec, forward(net, val_ds.inputs).output,
                                    val_ds.labels)
        hist["val_mse"].append(float(val_loss))
    return FitResult(net, hist)


def predict_powers(model: Mlp, gains, p_max=1.0) -> np.ndarray:
    """Network powers for one gain matrix, clamped into [0, p_max]."""
    out = forward(model, gain_features(gains)).output
    return np.clip(out * p_max, 0.0, p_max)


def eval_power_model(
    model: Mlp, gains_list, noise=1.0, p_max=1.0, base="log2"
) -> dict:
    """Achieved-rate-over-WMMSE statistics on held-out channel instances."""
    achieved = np.empty(len(gains_list))
    reference = np.empty(len(gains_list))
    for i, g in enumerate(gains_list):
        p_hat = predict_powers(model, g, p_max)
        ref = wmmse_power(g, p_max=p_max, noise=noise, base=base)
        achieved[i] = sum_rate(g, p_hat, noise=noise, base=base)
        reference[i] = max(ref.trace[-1], 1e-12)
    ratios = achieved / reference
    return {
        "ratio_mean": float(ratios.mean()),
        "ratio_min": float(ratios.min()),
        "ratio_std": float(ratios.std()),
        # headline number: mean achieved rate over mean solver rate
        "avg_rate_ratio": float(achieved.mean() / reference.mean()),
        "n": len(ratios),
    }


def sample_test_gains(n_links, n_samples, seed) -> list:
    rng = np.random.default_rng(seed)
    return [sample_rayleigh_gains(n_links, rng) for _ in range(n_samples)]


# ---------------------------------------------------------------------------
# Unsupervised power control (objective as loss)

UNSUPERVISED_LOSSES = ("neg_spectral_efficiency", "neg_energy_efficiency")


def train_unsupervised_power(
    n_links: int,
    sampler=None,
    hidden=(64, 64),
    loss="neg_spectral_efficiency",
    steps=3000,
    batch=32,
    lr=1e-3,
    seed=0,
    noise=1.0,
    p_max=1.0,
    circuit_power=0.0,
) -> FitResult:
    """Minibatch descent on the negated network objective, evaluated through
    the net's own power outputs. No labels anywhere: the channel itself is
    the teacher. sampler(rng) -> (n, n) gains; defaults to iid Rayleigh.
    """
    if loss not in UNSUPERVISED_LOSSES:
        raise ValueError(f"loss must be one of {UNSUPERVISED_LOSSES}")
    if steps < 1 or batch < 1:
        raise ValueError("steps and batch must be positive")
    draw = sampler or (lambda r: sample_rayleigh_gains(n_links, r))
    rng = np.random.default_rng(seed)
    # linear head + box projection, not a sigmoid: the mean gradient at
    # init points toward full power on every output, and a sigmoid that
    # saturates there is dead for good. Projection keeps corner solutions
    # reachable while boundary masking stops runaway drift.
    net = mlp_init((n_links * n_links, *hidden, n_links),
                   activation="relu", seed=seed)
    opt = make_optimizer("adam", lr, net)

    hist = {"loss": []}
    for _ in range(steps):
        gains = [draw(rng) for _ in range(batch)]
        x = np.stack([gain_features(g) for g in gains])
        trace = forward(net, x)
        raw = trace.post[-1]
        # net emits normalized powers, same convention as the supervised
        # models; the physical box is [0, p_max]
        phys = np.clip(raw, 0.0, 1.0) * p_max
        values = np.empty(batch)
        grad = np.empty_like(raw)
        for i, g in enumerate(gains):
            spec = LossSpec(loss, gains=g, noise=noise,
                            circuit_power=circuit_power)
            values[i], grad[i] = evaluate_loss(spec, phys[i])
        grad *= p_max
        # straight-through except where descent would leave the box
        grad[(raw >= 1.0) & (grad < 0.0)] = 0.0
        grad[(raw <= 0.0) & (grad > 0.0)] = 0.0
        net, opt = apply_update(net, backward(net, trace, grad / batch), opt)
        hist["loss"].append(float(values.mean()))
    return FitResult(net, hist)


def windowed_trend_ok(losses, window=1000, frac=0.95) -> bool:
    """True when at least frac of the sliding windows are non-increasing:
    later-half mean at most two standard errors above the earlier half.

    Without the allowance a converged plateau fails half its windows on
    sampling noise alone. Short histories compare halves directly.
    """
    x = np.asarray(losses, dtype=float)
    if len(x) < 2:
        return True

    def slack(seg_std, n_half):
        return 2.0 * seg_std * np.sqrt(2.0 / n_half)

    if len(x) <= window:
        half = len(x) // 2
        return float(x[half:].mean()) <= float(x[:half].mean()) + slack(
            float(x.std()), half
        )
    c = np.concatenate([[0.0], np.cumsum(x)])
    c2 = np.concatenate([[0.0], np.cumsum(x**2)])
    h = window // 2
    starts = np.arange(0, len(x) - window + 1)
    first = (c[starts + h] - c[starts]) / h
    second = (c[starts + window] - c[starts + h]) / (window - h)
    mean_w = (c[starts + window] - c[starts]) / window
    var_w = np.maximum((c2[starts + window] - c2[starts]) / window - mean_w**2, 0.0)
    ok = second <= first + slack(np.sqrt(var_w), h)
    return float(np.mean(ok)) >= frac


# ---------------------------------------------------------------------------
# LSAP decomposed into per-job classifiers


def gen_lsap_dataset(n: int, n_samples: int, seed=0) -> LabeledDataset:
    """Uniform(0,1) cost matrices labeled with the Hungarian permutation.

    labels[s] is the full worker vector; classifier j trains on column j.
    """
    if n < 2:
        raise ValueError("assignment needs n >= 2")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    costs = rng.uniform(0.0, 1.0, size=(n_samples, n, n))
    inputs = costs.reshape(n_samples, n * n)
    labels = np.empty((n_samples, n), dtype=int)
    for s in range(n_samples):
        labels[s] = hungarian(costs[s])[0].perm
    prov = {
        "generator": "hungarian",
        "seed": int(seed),
        "n": int(n),
        "n_samples": int(n_samples),
    }
    return LabeledDataset(inputs, labels, prov)


def lsap_train(
    n: int,
    n_samples: int,
    seed=0,
    hidden=(64, 64),
    epochs=30,
    lr=1e-3,
    batch=64,
    val_frac=0.1,
) -> tuple:
    """One n-way softmax classifier per job, cross-entropy on Hungarian
    labels. Returns (models, history) with per-job val accuracy curves.
    """
    ds = gen_lsap_dataset(n, n_samples, seed)
    train_ds, val_ds = split_dataset(ds, val_frac, seed)
    models = []
    hist = {"val_accuracy": []}
    for j in range(n):
        net = mlp_init((n * n, *hidden, n), activation="relu-softmax",
                       seed=seed * 101 + j)
        opt = make_optimizer("adam", lr, net)
        rng = np.random.default_rng(seed * 577 + j)
        y_train = np.eye(n)[train_ds.labels[:, j]]
        spec = LossSpec("cross_entropy")
        curve = []
        for _ in range(epochs):
            order = rng.permutation(len(train_ds))
            for lo in range(0, len(order), batch):
                sel = order[lo : lo + batch]
                trace = forward(net, train_ds.inputs[sel])
                _, grad = evaluate_loss(spec, trace.output, y_train[sel])
                net, opt = apply_update(net, backward(net, trace, grad), opt)
            pred = np.argmax(forward(net, val_ds.inputs).output, axis=1)
            curve.append(float(np.mean(pred == val_ds.labels[:, j])))
        models.append(net)
        hist["val_accuracy"].append(curve)
    return models, hist


def lsap_scores(models, cost) -> np.ndarray:
    """(n_jobs, n_workers) class probabilities from the per-job models."""
    c = np.asarray(cost, dtype=float)
    n = c.shape[0]
    if c.shape != (n, n) or len(models) != n:
        raise ValueError(f"need {len(models)} x {len(models)} costs, got {c.shape}")
    x = c.ravel()
    return np.stack([forward(m, x).output for m in models])


def lsap_infer(models, cost) -> Assignment:
    """Greedy collision avoidance over the per-job scores.

    Jobs claim workers in descending confidence order; a taken worker falls
    through to the job's best remaining one. Always a valid permutation.
    """
    scores = lsap_scores(models, cost)
    n = scores.shape[0]
    perm = np.full(n, -1, dtype=int)
    taken = np.zeros(n, dtype=bool)
    for j in np.argsort(-scores.max(axis=1), kind="stable"):
        options = np.where(taken, -np.inf, scores[j])
        pick = int(np.argmax(options))
        perm[j] = pick
        taken[pick] = True
    return Assignment(perm)


def lsap_accuracy(models, n_samples=1000, seed=123) -> dict:
    """Per-job and whole-permutation agreement with Hungarian on fresh
    uniform costs, plus wall-clock per instance for both methods.
    """
    n = len(models)
    rng = np.random.default_rng(seed)
    job_hits = np.zeros(n)
    exact = 0
    t_inf = t_hun = 0.0
    for _ in range(n_samples):
        cost = rng.uniform(0.0, 1.0, size=(n, n))
        t0 = time.perf_counter()
        pred = lsap_infer(models, cost).perm
        t_inf += time.perf_counter() - t0
        t0 = time.perf_counter()
        ref = hungarian(cost)[0].perm
        t_hun += time.perf_counter() - t0
        job_hits += pred == ref
        exact += int(np.array_equal(pred, ref))
    return {
        "per_job_accuracy": float(job_hits.mean() / n_samples),
        "exact_match": exact / n_samples,
        "infer_s_per_instance": t_inf / n_samples,
        "hungarian_s_per_instance": t_hun / n_samples,
        "n": n_samples,
    }


# ---------------------------------------------------------------------------
# Metrics


def write_pipeline_metrics_csv(rows, path) -> None:
    """rows of (pipeline, metric, value) under the standard header."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pipeline", "metric", "value"])
        for pipeline, metric, value in rows:
            w.writerow([pipeline, metric, value])
