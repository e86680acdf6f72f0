"""Training regimes: plain BCE, supervised attention, IGR, PGD and token masking."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import PAD_ID, TokenizedDocument
from .model import (
    ModelConfig,
    ModelParameters,
    baseline_ids,
    batch_probs,
    embed,
    forward,
    init_params,
    pad_batch,
)

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "supervised", "igr", "pgd", "tm")
PROB_CLAMP = 1e-12
KL_FLOOR = 1e-8

# Reference values from full-scale fine-tuning of a pretrained encoder.
REFERENCE_HPARAMS = {
    "learning_rate": 5e-5, "tm_learning_rate": 1e-5, "epochs": 20, "dropout": 0.2,
    "weight_decay": 0.0, "lambda1": 1e-5, "lambda2": 0.5, "lambda3": 0.5,
    "epsilon": 1e-5, "beta": 0.01, "tm_epochs": 1,
}


class TrainingError(RuntimeError):
    pass


class NumericError(TrainingError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "baseline"
    learning_rate: float | None = None   # None: 1e-3, or 2e-4 for tm
    epochs: int = 20
    tm_epochs: int = 1
    batch_size: int = 32
    warmup_fraction: float = 0.1
    weight_decay: float = 0.0
    lambda1: float = 1e-5
    lambda2: float = 0.5
    lambda3: float = 0.5
    beta: float = 0.01
    epsilon: float = 1e-5
    pgd_inner_steps: int = 3
    pgd_inner_lr: float = 0.1
    tm_mask_steps: int = 50
    tm_mask_lr: float = 0.1
    supervised_kl_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise TrainingError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for name in ("lambda1", "lambda2", "lambda3", "beta", "supervised_kl_weight", "weight_decay"):
            if getattr(self, name) < 0:
                raise TrainingError(f"{name} must be non-negative")
        if self.strategy == "pgd" and self.epsilon <= 0:
            raise TrainingError("epsilon must be positive for pgd")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise TrainingError("batch_size >= 1 and epochs >= 0 required")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 2e-4 if self.strategy == "tm" else 1e-3

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainingError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- losses

def bce_loss(probs, y) -> Tensor:
    """Mean binary cross-entropy over all entries (classes, and documents if batched)."""
    probs = ad.as_tensor(probs)
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape:
        raise ad.ShapeMismatch("bce_loss", probs.shape, y.shape)
    p = ad.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = ad.add(ad.mul(ad.log(p), y), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y))
    return ad.neg(ad.mean(ll))


def kl_target(n: int, evidence: Sequence[int]) -> np.ndarray:
    """Uniform over evidence tokens, floored elsewhere, renormalized."""
    t = np.full(n, KL_FLOOR)
    t[list(evidence)] = 1.0 / len(evidence)
    return t / t.sum()


def supervised_attention_loss(A, evidence: dict[int, Sequence[int]], weight: float = 1.0,
                              doc_id: str = "") -> Tensor:
    """``weight * sum_j KL(target_j || A_j)`` over annotated classes of one document.

    ``A`` is the (J, N) cross-attention; ``evidence`` maps class index to
    evidence token indices.
    """
    A = ad.as_tensor(A)
    n = A.shape[-1]
    total = Tensor(0.0)
    for j, idx in sorted(evidence.items()):
        if len(idx) == 0:
            log.warning("doc %s class %d: empty evidence set, skipped", doc_id, j)
            continue
        t = kl_target(n, idx)
        cross = ad.sum_(ad.mul(ad.log(ad.clamp(A[j], PROB_CLAMP, 1.0)), t))
        total = ad.add(total, ad.sub(float(np.sum(t * np.log(t))), cross))
    return ad.mul(total, weight)


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    ids: np.ndarray          # (B, N)
    mask: np.ndarray         # (B, N) bool
    y: np.ndarray            # (B, J)
    lengths: np.ndarray      # (B,)
    targets: np.ndarray | None = None     # (B, J, N) KL targets
    annotated: np.ndarray | None = None   # (B, J) bool
    target_entropy: np.ndarray | None = None  # (B, J) sum t log t

    @property
    def size(self) -> int:
        return len(self.ids)


def label_matrix(docs: Sequence[TokenizedDocument], labels: Sequence[str]) -> np.ndarray:
    index = {c: j for j, c in enumerate(labels)}
    y = np.zeros((len(docs), len(labels)))
    for i, d in enumerate(docs):
        for c in d.codes:
            if c in index:
                y[i, index[c]] = 1.0
    return y


def make_batch(docs: Sequence[TokenizedDocument], labels: Sequence[str],
               with_targets: bool = False) -> Batch:
    ids, mask = pad_batch([d.token_ids for d in docs])
    lengths = np.array([len(d) for d in docs])
    b = Batch(ids, mask, label_matrix(docs, labels), lengths)
    if with_targets:
        B, N = ids.shape
        J = len(labels)
        b.targets = np.zeros((B, J, N))
        b.annotated = np.zeros((B, J), dtype=bool)
        b.target_entropy = np.zeros((B, J))
        for i, d in enumerate(docs):
            for j, code in enumerate(labels):
                if code not in d.evidence:
                    continue
                idx = d.evidence_tokens(code)
                if not idx:
                    log.warning("doc %s code %s: empty evidence set, skipped", d.doc_id, code)
                    continue
                t = kl_target(lengths[i], idx)
                b.targets[i, j, : lengths[i]] = t
                b.annotated[i, j] = True
                b.target_entropy[i, j] = np.sum(t * np.log(t))
    return b


def batch_embeddings_baseline(params_table: Tensor, lengths: np.ndarray, n: int) -> Tensor:
    ids = np.full((len(lengths), n), PAD_ID, dtype=np.int64)
    for i, L in enumerate(lengths):
        ids[i, :L] = baseline_ids(int(L))
    return ad.gather(params_table, ids)


# ---------------------------------------------------------------- strategy losses

def baseline_batch_loss(w, config: ModelConfig, batch: Batch, rng=None) -> Tensor:
    out = forward(w, config, batch.ids, batch.mask, rng=rng)
    return bce_loss(out.probs, batch.y)


def supervised_batch_loss(w, config: ModelConfig, batch: Batch, weight: float, rng=None) -> Tensor:
    if batch.targets is None:
        raise TrainingError("supervised strategy needs evidence targets")
    out = forward(w, config, batch.ids, batch.mask, rng=rng)
    bce = bce_loss(out.probs, batch.y)
    cross = ad.sum_(ad.mul(ad.log(ad.clamp(out.A, PROB_CLAMP, 1.0)), batch.targets), -1)
    kl = ad.mul(ad.sub(batch.target_entropy, cross), batch.annotated.astype(np.float64))
    return ad.add(bce, ad.mul(ad.mean(ad.sum_(kl, -1)), weight))


def igr_total_loss(w, config: ModelConfig, batch: Batch, lambda1: float, rng=None) -> Tensor:
    """BCE plus ``lambda1`` times the Frobenius norm of d(BCE)/dX, per document.

    Must run inside an active tape: the input gradient is taken with
    ``create_graph=True`` so the penalty stays differentiable.
    """
    tape = ad.current_tape()
    X = embed(w, batch.ids)
    out = forward(w, config, batch.ids, batch.mask, X=X, rng=rng)
    bce = bce_loss(out.probs, batch.y)
    # gradient of the sum of per-document losses gives each document's own input gradient
    per_doc_sum = ad.mul(bce, float(batch.size))
    gX, = tape.gradient(per_doc_sum, [X], create_graph=True)
    penalty = ad.mean(ad.l2_norm(gX, axis=(1, 2)))
    return ad.add(bce, ad.mul(penalty, lambda1))


class Adam:
    """Adam / AdamW over a dict of arrays (decoupled weight decay)."""

    def __init__(self, arrays: dict[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             maximize: bool = False) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            if maximize:
                g = -g
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = arrays[k]
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def pgd_inner_max(loss_fn: Callable[[Tensor], Tensor], X: np.ndarray, epsilon: float,
                  steps: int = 3, inner_lr: float = 0.1, monitor: dict | None = None) -> np.ndarray:
    """Maximize ``loss_fn(X + eps*tanh(Z))`` over Z by Adam ascent from Z = 0.

    Returns the perturbation ``eps*tanh(Z*)``.  ``monitor`` accumulates the
    largest |delta| seen and the count of bound violations.
    """
    if epsilon <= 0:
        raise TrainingError("epsilon must be positive")
    X = np.asarray(X, dtype=np.float64)
    Z = {"Z": np.zeros_like(X)}
    opt = Adam(Z)
    delta = np.zeros_like(X)

    def check(d):
        worst = float(np.max(np.abs(d))) if d.size else 0.0
        if monitor is not None:
            monitor["checks"] = monitor.get("checks", 0) + 1
            monitor["max_abs_delta"] = max(monitor.get("max_abs_delta", 0.0), worst)
            if worst > epsilon:
                monitor["violations"] = monitor.get("violations", 0) + 1
        assert worst <= epsilon, f"|delta| = {worst} exceeds epsilon {epsilon}"

    check(delta)
    for _ in range(max(steps, 0)):
        with Tape() as tape:
            Zt = Tensor(Z["Z"], requires_grad=True)
            d = ad.mul(ad.tanh(Zt), epsilon)
            loss = loss_fn(ad.add(X, d))
        gZ, = tape.gradient(loss, [Zt])
        opt.step(Z, {"Z": gZ.data}, inner_lr, maximize=True)
        delta = epsilon * np.tanh(Z["Z"])
        check(delta)
    return delta


def pgd_batch_delta(params: ModelParameters, batch: Batch, epsilon: float, steps: int,
                    inner_lr: float, monitor: dict | None = None) -> np.ndarray:
    w = params.tensors()
    config = params.config
    X = params.arrays["tok_emb"][batch.ids]

    def loss_fn(Xp):
        return bce_loss(forward(w, config, batch.ids, batch.mask, X=Xp).probs, batch.y)

    return pgd_inner_max(loss_fn, X, epsilon, steps, inner_lr, monitor)


def pgd_total_loss(w, config: ModelConfig, batch: Batch, delta: np.ndarray, lambda2: float,
                   rng=None) -> Tensor:
    X = embed(w, batch.ids)
    clean = bce_loss(forward(w, config, batch.ids, batch.mask, X=X, rng=rng).probs, batch.y)
    adv_out = forward(w, config, batch.ids, batch.mask, X=ad.add(X, delta), rng=rng)
    return ad.add(clean, ad.mul(bce_loss(adv_out.probs, batch.y), lambda2))


@dataclass
class MaskState:
    soft: np.ndarray        # (B, N) continuous mask in [0, 1], one value per token
    hard: np.ndarray        # (B, N) rounded mask
    baseline: np.ndarray    # (B, N, D) baseline embeddings
    valid: np.ndarray       # (B, N) bool

    @property
    def masked_fraction(self) -> float:
        return float(np.mean(self.hard[self.valid] == 0))


def mask_inputs(X, baseline, M) -> Tensor:
    """``baseline * (1 - M) + X * M`` with a per-token mask broadcast over D."""
    M = ad.as_tensor(M)
    M3 = ad.reshape(M, M.shape + (1,))
    return ad.add(ad.mul(baseline, ad.sub(1.0, M3)), ad.mul(X, M3))


def tm_learn_mask(student: ModelParameters, batch: Batch, beta: float, steps: int = 50,
                  lr: float = 0.1) -> MaskState:
    """Sparse per-token mask keeping the student's outputs close to the unmasked ones.

    Minimizes ``mean(M) + beta * ||f(X) - f(x_m(X, M))||_1`` with
    ``M = sigmoid(u)``, ``u`` starting at 0 so ``M`` starts at 0.5.
    """
    if beta < 0:
        raise TrainingError("beta must be non-negative")
    w = student.tensors()
    config = student.config
    X = student.arrays["tok_emb"][batch.ids]
    base = batch_embeddings_baseline(w["tok_emb"], batch.lengths, batch.ids.shape[1]).data
    valid = batch.mask
    counts = valid.sum(axis=1)
    with ad.no_record():
        ref = forward(w, config, batch.ids, batch.mask, X=Tensor(X)).probs.data
    u = {"u": np.zeros(batch.ids.shape)}
    opt = Adam(u)
    vf = valid.astype(np.float64)
    for _ in range(steps):
        with Tape() as tape:
            ut = Tensor(u["u"], requires_grad=True)
            M = ad.sigmoid(ut)
            sparsity = ad.mean(ad.div(ad.sum_(ad.mul(M, vf), -1), counts))
            probs = forward(w, config, batch.ids, batch.mask, X=mask_inputs(X, base, M)).probs
            fidelity = ad.mean(ad.l1_norm(ad.sub(probs, ref), axis=-1))
            loss = ad.add(sparsity, ad.mul(fidelity, beta))
        gu, = tape.gradient(loss, [ut])
        opt.step(u, {"u": gu.data}, lr)
    soft = 1.0 / (1.0 + np.exp(-u["u"]))
    return MaskState(soft, np.round(soft), base, valid)


def tm_distill_loss(w, config: ModelConfig, batch: Batch, hard_mask: np.ndarray,
                    teacher_probs: np.ndarray, lambda3: float, rng=None) -> Tensor:
    """``||f_s(X) - f_t(X)||_1 + lambda3 * ||f_s(X) - f_s(x_m(X, M))||_1`` per document, batch mean."""
    X = embed(w, batch.ids)
    base = batch_embeddings_baseline(w["tok_emb"], batch.lengths, batch.ids.shape[1])
    student = forward(w, config, batch.ids, batch.mask, X=X, rng=rng).probs
    masked = forward(w, config, batch.ids, batch.mask, X=mask_inputs(X, base, hard_mask), rng=rng).probs
    gap = ad.mean(ad.l1_norm(ad.sub(student, teacher_probs), axis=-1))
    inv = ad.mean(ad.l1_norm(ad.sub(student, masked), axis=-1))
    return ad.add(gap, ad.mul(inv, lambda3))


# ---------------------------------------------------------------- schedule and loop

def lr_schedule(step: int, total_steps: int, warmup_fraction: float, peak_lr: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0."""
    if total_steps <= 0:
        return peak_lr
    warm = warmup_fraction * total_steps
    if warm > 0 and step < warm:
        return peak_lr * step / warm
    if total_steps == warm:
        return peak_lr
    return peak_lr * max(0.0, (total_steps - step) / (total_steps - warm))


def make_batches(docs: Sequence[TokenizedDocument], batch_size: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches; lengths are sorted within windows of eight batches to cut padding."""
    order = rng.permutation(len(docs))
    window = batch_size * 8
    batches = []
    for s in range(0, len(order), window):
        chunk = sorted(order[s: s + window], key=lambda i: (len(docs[i]), i))
        batches += [chunk[k: k + batch_size] for k in range(0, len(chunk), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    pgd: dict = field(default_factory=dict)
    mask_fractions: list[float] = field(default_factory=list)

    def add(self, **rec):
        self.records.append(rec)
        log.info("%s", rec)


def micro_f1(probs: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    pred = probs >= threshold
    tp = float(np.sum(pred & (y > 0)))
    fp = float(np.sum(pred & (y == 0)))
    fn = float(np.sum(~pred & (y > 0)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def evaluate_split(params: ModelParameters, docs: Sequence[TokenizedDocument]) -> tuple[float, float]:
    if not docs:
        return float("nan"), float("nan")
    labels = params.config.labels
    probs = batch_probs(params, [d.token_ids for d in docs])
    y = label_matrix(docs, labels)
    return float(bce_loss(probs, y).data), micro_f1(probs, y)


def batch_loss(strategy: str, w, params: ModelParameters, batch: Batch, config: TrainConfig,
               rng=None, teacher_probs=None, mask=None) -> Tensor:
    """Per-batch loss of a strategy; call inside an active tape."""
    mc = params.config
    if strategy == "baseline":
        return baseline_batch_loss(w, mc, batch, rng)
    if strategy == "supervised":
        return supervised_batch_loss(w, mc, batch, config.supervised_kl_weight, rng)
    if strategy == "igr":
        return igr_total_loss(w, mc, batch, config.lambda1, rng)
    if strategy == "pgd":
        raise TrainingError("pgd needs a precomputed perturbation; use pgd_total_loss")
    raise TrainingError(f"no direct batch loss for {strategy!r}")


def train_run(train_docs: Sequence[TokenizedDocument], val_docs: Sequence[TokenizedDocument],
              model_config: ModelConfig, config: TrainConfig,
              init: ModelParameters | None = None, log_to: TrainLog | None = None) -> ModelParameters:
    """Train under ``config.strategy`` and return frozen parameters.

    ``tm`` fine-tunes a student copy of ``init`` (a trained baseline) against
    a frozen teacher copy for ``config.tm_epochs`` epochs.
    """
    trace = log_to if log_to is not None else TrainLog()
    strategy = config.strategy
    labels = model_config.labels
    if strategy == "tm" and init is None:
        raise TrainingError("tm needs a trained baseline checkpoint to initialize from")
    if strategy == "supervised" and not any(d.evidence for d in train_docs):
        raise TrainingError("supervised strategy needs evidence annotations")
    params = init.copy() if init is not None else init_params(model_config, config.seed)
    epochs = config.tm_epochs if strategy == "tm" else config.epochs
    if epochs == 0 or not train_docs:
        return params.freeze()
    teacher = init.copy().freeze() if strategy == "tm" else None
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(params.arrays, weight_decay=config.weight_decay)
    steps_per_epoch = -(-len(train_docs) // config.batch_size)
    total = steps_per_epoch * epochs
    step = 0
    for epoch in range(epochs):
        losses = []
        for idx in make_batches(train_docs, config.batch_size, rng):
            batch = make_batch([train_docs[i] for i in idx], labels,
                               with_targets=strategy == "supervised")
            lr = lr_schedule(step, total, config.warmup_fraction, config.lr)
            loss, grads = _strategy_step(strategy, params, teacher, batch, config, rng, trace)
            value = float(loss.data)
            if not np.isfinite(value) or value < 0:
                raise NumericError(f"loss {value} at epoch {epoch} step {step}")
            opt.step(params.arrays, grads, lr)
            losses.append(value)
            step += 1
        if not params.all_finite():
            raise NumericError(f"non-finite parameters after epoch {epoch}")
        val_loss, val_f1 = evaluate_split(params, val_docs)
        trace.add(epoch=epoch, split="train", loss=float(np.mean(losses)), strategy=strategy)
        trace.add(epoch=epoch, split="val", loss=val_loss, micro_f1=val_f1, strategy=strategy)
    return params.freeze()


def _strategy_step(strategy, params, teacher, batch, config, rng, trace):
    names = list(params.arrays)
    if strategy == "pgd":
        delta = pgd_batch_delta(params, batch, config.epsilon, config.pgd_inner_steps,
                                config.pgd_inner_lr, trace.pgd)
    elif strategy == "tm":
        state = tm_learn_mask(params, batch, config.beta, config.tm_mask_steps, config.tm_mask_lr)
        trace.mask_fractions.append(state.masked_fraction)
        teacher_probs = batch_probs(teacher, [s[: n] for s, n in zip(batch.ids, batch.lengths)])
    w = params.tensors(requires_grad=True)
    with Tape() as tape:
        if strategy == "pgd":
            loss = pgd_total_loss(w, params.config, batch, delta, config.lambda2, rng)
        elif strategy == "tm":
            loss = tm_distill_loss(w, params.config, batch, state.hard, teacher_probs,
                                   config.lambda3, rng)
        else:
            loss = batch_loss(strategy, w, params, batch, config, rng)
    grads = tape.gradient(loss, [w[n] for n in names])
    return loss, {n: g.data for n, g in zip(names, grads)}
