"""Dense float64 tensors with reverse-mode autodiff over an explicit tape.

Every primitive lives in :mod:`peftcap.ops`; this module owns the Tensor and
Tape containers, the backward walk, and the finite-difference gradient
checker used to validate every primitive's hand-written gradient.

Recording model: ops record onto the innermost active ``Tape`` (entered as a
context manager) whenever at least one input requires a gradient. Outside a
tape, ops are pure functions and their outputs never require gradients, which
doubles as the inference / no-grad mode.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class RankError(ValueError):
    """A scalar was required (or forbidden) and the rank does not match."""


class TapeError(RuntimeError):
    """Tape misuse: backward off-tape, or repeated backward without reset."""


class Tensor:
    """A dense float64 array with an optional gradient slot.

    ``data`` is always a C-contiguous (flat row-major) float64 ndarray;
    ``grad`` when present has identical shape. ``node_id``/``tape`` link the
    tensor to the tape it was last recorded on.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class TapeEntry:
    """One recorded primitive: kind, operand node ids, and its pullback."""

    __slots__ = ("op", "input_ids", "output_id", "backward")

    def __init__(self, op: str, input_ids: tuple, output_id: int,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward = backward


# Innermost-first stack of active tapes.
_ACTIVE: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Inputs are registered before the entries that consume them, so the entry
    list is topologically ordered by construction and a single reverse sweep
    visits every node exactly once.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._tensors: dict[int, Tensor] = {}
        self._next_id = 0
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tape contexts must nest"

    def register(self, t: Tensor) -> int:
        nid = t.node_id
        if nid is None or t.tape is not self:
            nid = self._next_id
            self._next_id += 1
            t.node_id = nid
            t.tape = self
            self._tensors[nid] = t
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        input_ids = tuple(self.register(t) for t in inputs)
        output_id = self.register(output)
        self.entries.append(TapeEntry(op, input_ids, output_id, backward))

    def reset(self) -> None:
        """Allow another backward pass; subsequent gradients accumulate."""
        self.consumed = False


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    The walk is a single reverse sweep over the tape in recording order, so
    accumulation order is fixed and results are bit-reproducible. A second
    call on the same tape raises (grads would silently accumulate); call
    ``tape.reset()`` first if accumulation is intended.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None or loss.node_id not in tape._tensors:
        raise TapeError("loss is not recorded on any tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; reset() before accumulating")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        out_grad = grads.get(entry.output_id)
        if out_grad is None:
            continue
        input_grads = entry.backward(out_grad)
        for nid, g in zip(entry.input_ids, input_grads):
            if g is None:
                continue
            acc = grads.get(nid)
            grads[nid] = g if acc is None else acc + g

    for nid, t in tape._tensors.items():
        if t.requires_grad and nid in grads:
            g = grads[nid]
            t.grad = g.copy() if t.grad is None else t.grad + g


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` must be scalar-valued. The error per component is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``; the max over components is
    returned. The central difference is the independent side of the check and
    never touches the tape.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        y = f(leaf)
        if y.data.size != 1:
            raise RankError(f"finite_diff_check needs scalar f, got shape {y.data.shape}")
        backward(y)
    g_ad = leaf.grad
    if g_ad is None:
        g_ad = np.zeros_like(leaf.data)

    def eval_at(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        if out.data.size != 1:
            raise RankError("finite_diff_check needs scalar f")
        return float(out.data.reshape(()))

    flat = x.data.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += eps
        minus[i] -= eps
        g_fd[i] = (eval_at(plus.reshape(x.data.shape))
                   - eval_at(minus.reshape(x.data.shape))) / (2.0 * eps)
    g_fd = g_fd.reshape(x.data.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom))
