"""Program-level entry points: record, differentiate, check, and DeepLift.

A *program* is either a Python callable taking named tensors as keyword
arguments, or a graph description: a sequence of steps
``(out_name, primitive_name, [arg_names], {kwargs})`` evaluated in order,
whose last step is the output.  Graph descriptions may only use names from
``PRIMITIVES``.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .tensor import (
    AutodiffError,
    ShapeMismatch,
    Tape,
    Tensor,
    no_record,
    primitive,
)

Step = tuple
Program = Union[Callable[..., Tensor], Sequence[Step]]
GradientSet = dict  # input name -> ndarray shaped like the input

RESCALE_GUARD = 1e-10


def _run(program: Program, tensors: Mapping[str, Tensor]) -> Tensor:
    if callable(program):
        out = program(**tensors)
    else:
        env = dict(tensors)
        out = None
        for step in program:
            name, op, args = step[0], step[1], step[2]
            kwargs = step[3] if len(step) > 3 else {}
            fn = primitive(op)
            vals = [env[a] if isinstance(a, str) else a for a in args]
            env[name] = out = fn(*vals, **kwargs)
        if out is None:
            raise AutodiffError("empty program")
    if not isinstance(out, Tensor):
        raise AutodiffError(f"program returned {type(out).__name__}, expected Tensor")
    return out


def evaluate(program: Program, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Eager evaluation, nothing recorded."""
    with no_record():
        return _run(program, {k: Tensor(v) for k, v in inputs.items()}).data


def forward_record(program: Program, inputs: Mapping[str, np.ndarray]) -> tuple[Tensor, Tape]:
    tape = Tape()
    with tape:
        tensors = {k: tape.mark(k, np.array(v, dtype=np.float64)) for k, v in inputs.items()}
        out = _run(program, tensors)
    tape.output = out
    return out, tape


def backward(tape: Tape, seed=None) -> GradientSet:
    """Gradients of ``<seed, output>`` with respect to every marked input."""
    out = tape.output
    if out is None:
        raise AutodiffError("tape has no recorded output")
    if seed is not None:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.shape:
            raise ShapeMismatch("seed", seed.shape, out.shape)
        if not np.all(np.isfinite(seed)):
            raise AutodiffError("seed must be finite")
    elif out.data.size != 1:
        raise AutodiffError(f"seed required for output of shape {out.shape}")
    names = list(tape.inputs)
    grads = tape.gradient(out, [tape.inputs[n] for n in names], seed)
    return {n: g.data for n, g in zip(names, grads)}


def finite_diff_grad(program: Program, inputs: Mapping[str, np.ndarray],
                     h: float = 1e-5) -> GradientSet:
    """Central-difference gradient of a scalar-valued program."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    if evaluate(program, base).size != 1:
        raise AutodiffError("finite_diff_grad needs a scalar-valued program")
    result = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(evaluate(program, base))
            flat[i] = orig - h
            down = float(evaluate(program, base))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        result[name] = g
    return result


def reference_context(program: Program, baseline: Mapping[str, np.ndarray]) -> Tape:
    """Record the program on the baseline input; node-aligned with the real run."""
    _, ref = forward_record(program, baseline)
    return ref


def check_topology(tape: Tape, ref: Tape) -> None:
    if len(tape.nodes) != len(ref.nodes):
        raise AutodiffError(
            f"topology mismatch: {len(tape.nodes)} nodes vs {len(ref.nodes)} reference nodes")
    for a, b in zip(tape.nodes, ref.nodes):
        if a.kind != b.kind or a.value.shape != b.value.shape:
            raise AutodiffError(
                f"topology mismatch at node {a.index}: {a.kind}{a.value.shape} "
                f"vs {b.kind}{b.value.shape}")


def rescale_multipliers(tape: Tape, ref: Tape, output: Tensor, seed: np.ndarray,
                        wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse pass where elementwise nonlinearities use the rescale rule.

    Every other primitive (including softmax and layernorm) back-propagates
    its ordinary derivative at the actual input.
    """
    check_topology(tape, ref)
    wanted = {id(w) for w in wrt}
    grads: dict[int, Tensor] = {id(output): Tensor(seed)}
    with no_record():
        for node in reversed(tape.nodes[: output.node.index + 1]):
            key = id(node.out)
            g = grads.get(key) if key in wanted else grads.pop(key, None)
            if g is None:
                continue
            if node.deriv is not None:
                rnode = ref.nodes[node.index]
                x = node.inputs[0].data
                dx = x - rnode.inputs[0].data
                dy = node.value - rnode.value
                small = np.abs(dx) < RESCALE_GUARD
                m = np.where(small, node.deriv(x, node.value),
                             dy / np.where(small, 1.0, dx))
                in_grads = (Tensor(g.data * m),)
            else:
                in_grads = node.vjp(g, node.out)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else Tensor(prev.data + gi.data)
    return [grads[id(w)].data if id(w) in grads else np.zeros_like(w.data) for w in wrt]


def deeplift_multipliers(tape: Tape, ref: Tape, class_index: int | None = None) -> GradientSet:
    """DeepLift multipliers for each marked input.

    The contribution of input ``x`` is ``multiplier * (x - x_ref)``.  For a
    vector output, ``class_index`` selects the explained entry along the
    last axis.
    """
    out = tape.output
    if out is None or ref.output is None:
        raise AutodiffError("both tapes need a recorded output")
    seed = np.zeros_like(out.data)
    if out.data.size == 1:
        seed[...] = 1.0
    else:
        if class_index is None:
            raise AutodiffError("class_index required for vector outputs")
        seed[..., class_index] = 1.0
    names = list(tape.inputs)
    mults = rescale_multipliers(tape, ref, out, seed, [tape.inputs[n] for n in names])
    return dict(zip(names, mults))
