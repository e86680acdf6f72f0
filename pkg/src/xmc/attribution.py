"""Feature attribution methods: per-token, non-negative scores for one class."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import END_ID, MASK_ID, START_ID
from .model import ForwardResult, ModelParameters, batch_probs, forward, predict

log = logging.getLogger(__name__)

METHODS = ("attention", "rollout", "attgrad", "inputxgrad", "intgrad", "deeplift",
           "occlusion1", "lime", "kernelshap", "attingrad", "random")
STOCHASTIC = ("lime", "kernelshap", "random")
GRADIENT_BASED = ("attention", "rollout", "attgrad", "inputxgrad", "intgrad", "deeplift", "attingrad")

Scorer = Callable[[np.ndarray], np.ndarray]   # (M, N) token ids -> (M, J) probabilities


class AttributionError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttributionVector:
    doc_id: str
    class_index: int
    scores: np.ndarray
    method: str
    seed: int | None = None
    code: str | None = None
    signed: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1:
            raise AttributionError(f"scores must be 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise AttributionError(f"{self.method}: non-finite scores for {self.doc_id}")
        if np.any(s < 0):
            raise AttributionError(f"{self.method}: negative scores for {self.doc_id}")
        object.__setattr__(self, "scores", s)

    def __len__(self):
        return len(self.scores)

    def to_json(self) -> dict:
        return {"doc_id": self.doc_id, "code": self.code, "method": self.method, "seed": self.seed,
                "scores": [float(v) for v in self.scores]}


@dataclass(frozen=True)
class BaselineSpec:
    """Start marker, mask token repeated, end marker."""
    start_id: int = START_ID
    mask_id: int = MASK_ID
    end_id: int = END_ID

    def ids(self, n: int) -> np.ndarray:
        ids = np.full(n, self.mask_id, dtype=np.int64)
        ids[0], ids[-1] = self.start_id, self.end_id
        return ids

    def embeddings(self, params: ModelParameters, n: int) -> np.ndarray:
        return params.arrays["tok_emb"][self.ids(n)]


@dataclass(frozen=True)
class PerturbationBudget:
    samples: int = 1000
    mask_prob: float = 0.5      # LIME drop probability per token
    ridge: float = 0.01
    kernel_width: float = 0.25  # LIME kernel width, times sqrt(N)

    def check(self, n: int) -> None:
        if self.samples < n + 2:
            raise AttributionError(f"budget of {self.samples} samples too small for {n} tokens (need N + 2)")
        if not 0.0 < self.mask_prob < 1.0:
            raise AttributionError("mask_prob must lie in (0, 1)")
        if self.ridge < 0 or self.kernel_width <= 0:
            raise AttributionError("ridge >= 0 and kernel_width > 0 required")


def _vector(scores, method, doc_id="", j=0, seed=None, signed=None, code=None) -> AttributionVector:
    return AttributionVector(doc_id, j, np.asarray(scores, dtype=np.float64), method, seed, code, signed)


def _row_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=-1))


# ---------------------------------------------------------------- attention and gradients

def attr_attention(fr: ForwardResult, j: int, doc_id: str = "") -> AttributionVector:
    return _vector(fr.attention[j].copy(), "attention", doc_id, j)


def rollout_matrix(stack: Sequence[np.ndarray], renormalize: bool = True) -> np.ndarray:
    """Accumulated rollout over per-layer (heads, N, N) self-attention."""
    out = None
    for P in stack:
        a = P.mean(axis=0) + np.eye(P.shape[-1])
        if renormalize:
            a = a / a.sum(axis=-1, keepdims=True)
        out = a if out is None else a @ out
    return out


def attr_rollout(fr: ForwardResult, j: int, doc_id: str = "", renormalize: bool = True) -> AttributionVector:
    scores = fr.attention[j].copy()
    if fr.self_attention:
        scores = scores @ rollout_matrix(fr.self_attention, renormalize)
    return _vector(scores, "rollout", doc_id, j)


def attr_attgrad(fr: ForwardResult, j: int, doc_id: str = "") -> AttributionVector:
    _, gA = fr.gradients(j)
    return _vector(fr.attention[j] * np.abs(gA), "attgrad", doc_id, j)


def attr_inputxgrad(fr: ForwardResult, j: int, doc_id: str = "") -> AttributionVector:
    gX, _ = fr.gradients(j)
    signed = fr.embeddings * gX
    return _vector(_row_norm(signed), "inputxgrad", doc_id, j, signed=signed)


def attr_attingrad(fr: ForwardResult, j: int, doc_id: str = "") -> AttributionVector:
    gX, _ = fr.gradients(j)
    ixg = _row_norm(fr.embeddings * gX)
    return _vector(fr.attention[j] * ixg, "attingrad", doc_id, j)


def integrated_gradients(f: Callable[[Tensor], Tensor], X: np.ndarray, B: np.ndarray,
                         steps: int = 64, chunk: int = 32) -> np.ndarray:
    """Signed integrated gradients by the midpoint rule on the path B -> X.

    ``f`` maps a batch of inputs (S, *X.shape) to S scalar outputs.
    """
    if steps < 1:
        raise AttributionError("steps must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(X)
    for s in range(0, steps, chunk):
        a = alphas[s: s + chunk].reshape((-1,) + (1,) * X.ndim)
        with ad.Tape() as tape:
            path = Tensor(B + a * (X - B), requires_grad=True)
            y = ad.sum_(f(path))
        g, = tape.gradient(y, [path])
        total += g.data.sum(axis=0)
    return (X - B) * total / steps


def _class_fn(fr: ForwardResult, j: int):
    w = fr.params.tensors()
    config = fr.params.config
    tokens = fr.tokens

    def f(Xb: Tensor) -> Tensor:
        ids = np.broadcast_to(tokens, (Xb.shape[0], len(tokens)))
        return forward(w, config, ids, X=Xb).probs[:, j]

    return f


def attr_intgrad(fr: ForwardResult, j: int, steps: int = 64, doc_id: str = "",
                 baseline: BaselineSpec = BaselineSpec()) -> AttributionVector:
    B = baseline.embeddings(fr.params, len(fr.tokens))
    signed = integrated_gradients(_class_fn(fr, j), fr.embeddings, B, steps)
    return _vector(_row_norm(signed), "intgrad", doc_id, j, signed=signed)


def deeplift_contributions(program, X: np.ndarray, B: np.ndarray, class_index: int | None = None) -> np.ndarray:
    """Signed DeepLift contributions ``multiplier * (X - B)`` of a program of one input ``X``."""
    X = np.asarray(X, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _, tape = ad.forward_record(program, {"X": X})
    ref = ad.reference_context(program, {"X": B})
    mult = ad.deeplift_multipliers(tape, ref, class_index)["X"]
    return mult * (X - B)


def attr_deeplift(fr: ForwardResult, j: int, doc_id: str = "",
                  baseline: BaselineSpec = BaselineSpec()) -> AttributionVector:
    w = fr.params.tensors()
    config = fr.params.config
    ids = fr.tokens[None, :]

    def program(X):
        return forward(w, config, ids, X=ad.reshape(X, (1,) + X.shape)).probs

    B = baseline.embeddings(fr.params, len(fr.tokens))
    signed = deeplift_contributions(program, fr.embeddings, B, j)
    return _vector(_row_norm(signed), "deeplift", doc_id, j, signed=signed)


# ---------------------------------------------------------------- perturbation methods

def scorer(model) -> Scorer:
    if isinstance(model, ModelParameters):
        return lambda ids: batch_probs(model, list(np.asarray(ids)))
    if callable(model):
        return lambda ids: np.asarray(model(np.asarray(ids)), dtype=np.float64)
    raise AttributionError(f"cannot score with {type(model).__name__}")


def _masked(tokens: np.ndarray, keep: np.ndarray, mask_id: int) -> np.ndarray:
    return np.where(keep.astype(bool), tokens[None, :], mask_id)


def _evaluate(f: Scorer, batches: np.ndarray, j: int, chunk: int = 512) -> np.ndarray:
    return np.concatenate([f(batches[i: i + chunk])[:, j] for i in range(0, len(batches), chunk)])


def attr_occlusion1(model, tokens, j: int, doc_id: str = "", mask_id: int = MASK_ID) -> AttributionVector:
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    keep = np.ones((n + 1, n), dtype=bool)
    keep[np.arange(1, n + 1), np.arange(n)] = False
    y = _evaluate(scorer(model), _masked(tokens, keep, mask_id), j)
    signed = y[0] - y[1:]
    return _vector(np.maximum(signed, 0.0), "occlusion1", doc_id, j, signed=signed)


def weighted_ridge(Z: np.ndarray, y: np.ndarray, weights: np.ndarray, ridge: float) -> np.ndarray:
    """Weighted ridge regression with an unpenalized intercept; returns the coefficients."""
    n = Z.shape[1]
    D = np.hstack([np.ones((len(Z), 1)), Z])
    DtW = D.T * weights
    for lam in (ridge, ridge * 100 if ridge > 0 else 1e-6):
        reg = lam * np.eye(n + 1)
        reg[0, 0] = 0.0
        A = DtW @ D + reg
        if np.linalg.cond(A) < 1e12:
            return np.linalg.solve(A, DtW @ y)[1:]
        log.warning("singular regression (ridge %g), retrying with a stronger ridge", lam)
    raise AttributionError("regression singular after ridge retry")


def attr_lime(model, tokens, j: int, budget: PerturbationBudget = PerturbationBudget(),
              seed: int = 0, doc_id: str = "", mask_id: int = MASK_ID) -> AttributionVector:
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    budget.check(n)
    rng = np.random.default_rng(seed)
    keep = (rng.random((budget.samples, n)) >= budget.mask_prob).astype(np.float64)
    keep[0] = 1.0   # the unperturbed document
    y = _evaluate(scorer(model), _masked(tokens, keep, mask_id), j)
    dist2 = n - keep.sum(axis=1)     # squared distance to the all-kept vector
    width = budget.kernel_width * np.sqrt(n)
    weights = np.sqrt(np.exp(-dist2 / width ** 2))
    coef = weighted_ridge(keep, y, weights, budget.ridge)
    return _vector(np.maximum(coef, 0.0), "lime", doc_id, j, seed, signed=coef)


def shapley_kernel_samples(n: int, samples: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Coalitions and kernel weights, excluding the empty and full coalitions.

    Whole coalition sizes are enumerated (in complementary pairs, smallest
    first) while the budget covers them at their kernel share; remaining
    sizes are sampled in complementary pairs with duplicates merged.
    """
    if n < 2:
        return np.zeros((0, n)), np.zeros(0)
    samples = min(samples, 2 ** n - 2)
    n_sizes = int(np.ceil((n - 1) / 2))
    n_paired = (n - 1) // 2
    size_w = np.array([(n - 1) / (s * (n - s)) for s in range(1, n_sizes + 1)])
    size_w[:n_paired] *= 2
    size_w /= size_w.sum()
    rows: list[np.ndarray] = []
    weights: list[float] = []
    left = samples
    remaining = size_w.copy()
    full_sizes = 0
    for k, s in enumerate(range(1, n_sizes + 1)):
        count = comb(n, s) * (2 if k < n_paired else 1)
        if left * remaining[k] / count < 1.0 - 1e-8:
            break
        full_sizes += 1
        left -= count
        if remaining[k] < 1.0:
            remaining /= (1.0 - remaining[k])
        w_each = size_w[k] / count
        for combo in combinations(range(n), s):
            z = np.zeros(n)
            z[list(combo)] = 1.0
            rows.append(z)
            weights.append(w_each)
            if k < n_paired:
                rows.append(1.0 - z)
                weights.append(w_each)
    fixed_weight = float(sum(weights))
    if full_sizes < n_sizes and left > 0:
        dist = size_w[full_sizes:] / size_w[full_sizes:].sum()
        seen: dict[bytes, int] = {}
        sampled: list[np.ndarray] = []
        counts: list[float] = []
        attempts = 0
        while left > 0 and attempts < 4 * samples:
            attempts += 1
            s = full_sizes + 1 + int(rng.choice(len(dist), p=dist))
            z = np.zeros(n)
            z[rng.permutation(n)[:s]] = 1.0
            for cand in ((z, 1.0 - z) if left > 1 else (z,)):
                key = cand.astype(np.uint8).tobytes()
                if key in seen:
                    counts[seen[key]] += 1.0
                else:
                    seen[key] = len(sampled)
                    sampled.append(cand)
                    counts.append(1.0)
                    left -= 1
        c = np.array(counts)
        rows += sampled
        weights += list(c / c.sum() * (1.0 - fixed_weight))
    return np.array(rows), np.array(weights)


def kernel_shap_values(f_coalition: Callable[[np.ndarray], np.ndarray], n: int, samples: int,
                       rng: np.random.Generator, ridge: float = 0.0) -> np.ndarray:
    """Shapley estimates for a set function given on (M, n) binary coalition rows.

    Efficiency (values sum to f(full) - f(empty)) is enforced exactly by
    eliminating the last variable before the weighted regression.
    """
    ends = f_coalition(np.vstack([np.zeros(n), np.ones(n)]))
    f_empty, f_full = float(ends[0]), float(ends[1])
    total = f_full - f_empty
    if n == 1:
        return np.array([total])
    Z, w = shapley_kernel_samples(n, samples, rng)
    y = f_coalition(Z) - f_empty
    target = y - Z[:, -1] * total
    design = Z[:, :-1] - Z[:, -1:]
    sw = np.sqrt(w)
    A = design * sw[:, None]
    b = target * sw
    lhs = A.T @ A + ridge * np.eye(n - 1)
    for lam in (0.0, 1e-8):
        try:
            phi = np.linalg.solve(lhs + lam * np.eye(n - 1), A.T @ b)
            break
        except np.linalg.LinAlgError:
            log.warning("singular shapley regression, retrying with ridge")
    else:
        raise AttributionError("shapley regression singular after ridge retry")
    return np.append(phi, total - phi.sum())


def attr_kernelshap(model, tokens, j: int, budget: PerturbationBudget = PerturbationBudget(),
                    seed: int = 0, doc_id: str = "", mask_id: int = MASK_ID) -> AttributionVector:
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    budget.check(n)
    f = scorer(model)
    phi = kernel_shap_values(lambda Z: _evaluate(f, _masked(tokens, Z, mask_id), j), n,
                             budget.samples, np.random.default_rng(seed))
    return _vector(np.maximum(phi, 0.0), "kernelshap", doc_id, j, seed, signed=phi)


def attr_random(n: int, seed: int = 0, doc_id: str = "", j: int = 0) -> AttributionVector:
    return _vector(np.random.default_rng(seed).random(n), "random", doc_id, j, seed)


# ---------------------------------------------------------------- dispatch and I/O

@dataclass(frozen=True)
class AttributionSettings:
    intgrad_steps: int = 64
    budget: PerturbationBudget = PerturbationBudget()
    rollout_renormalize: bool = True


def explain(method: str, params: ModelParameters, tokens, classes: Iterable[int], doc_id: str = "",
            seed: int = 0, settings: AttributionSettings = AttributionSettings(),
            labels: Sequence[str] | None = None) -> list[AttributionVector]:
    """Attributions of one method for several classes of one document (one forward pass)."""
    if method not in METHODS:
        raise AttributionError(f"unknown method {method!r}")
    tokens = np.asarray(tokens, dtype=np.int64)
    classes = list(classes)
    fr = predict(tokens, params, record=method in ("attgrad", "inputxgrad", "attingrad")) \
        if method in GRADIENT_BASED else None
    out = []
    for j in classes:
        # per-pair seed so one pair's scores do not depend on which others are explained
        pair_seed = _pair_seed(seed, doc_id, j)
        if method == "attention":
            v = attr_attention(fr, j, doc_id)
        elif method == "rollout":
            v = attr_rollout(fr, j, doc_id, settings.rollout_renormalize)
        elif method == "attgrad":
            v = attr_attgrad(fr, j, doc_id)
        elif method == "inputxgrad":
            v = attr_inputxgrad(fr, j, doc_id)
        elif method == "attingrad":
            v = attr_attingrad(fr, j, doc_id)
        elif method == "intgrad":
            v = attr_intgrad(fr, j, settings.intgrad_steps, doc_id)
        elif method == "deeplift":
            v = attr_deeplift(fr, j, doc_id)
        elif method == "occlusion1":
            v = attr_occlusion1(params, tokens, j, doc_id)
        elif method == "lime":
            v = attr_lime(params, tokens, j, settings.budget, pair_seed, doc_id)
        elif method == "kernelshap":
            v = attr_kernelshap(params, tokens, j, settings.budget, pair_seed, doc_id)
        else:
            v = attr_random(len(tokens), pair_seed, doc_id, j)
        code = labels[j] if labels is not None else None
        out.append(AttributionVector(doc_id, j, v.scores, method,
                                     seed if method in STOCHASTIC else None, code, v.signed))
    return out


def _pair_seed(seed: int, doc_id: str, j: int) -> int:
    ss = np.random.SeedSequence([seed, j, *doc_id.encode()])
    return int(ss.generate_state(1)[0])


def write_attributions(path, vectors: Iterable[AttributionVector]) -> None:
    with open(path, "w") as fh:
        for v in vectors:
            fh.write(json.dumps(v.to_json(), sort_keys=True) + "\n")


def read_attributions(path, labels: Sequence[str] | None = None) -> list[AttributionVector]:
    index = {c: j for j, c in enumerate(labels)} if labels is not None else {}
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            code = obj["code"]
            out.append(AttributionVector(obj["doc_id"], index.get(code, -1), np.array(obj["scores"], dtype=np.float64),
                                         obj["method"], obj.get("seed"), code))
        except (KeyError, ValueError, TypeError) as exc:
            raise AttributionError(f"{path}:{lineno}: bad attribution record ({exc})") from exc
    return out
