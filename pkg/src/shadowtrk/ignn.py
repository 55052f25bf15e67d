"""Interaction GNN for edge classification.

Node and edge inputs are encoded once; each of the L message-passing rounds
concatenates the current encodings with the initial ones, builds one
message per edge from the edge and both endpoints, sums messages at the
source and at the destination vertex, and updates the vertices. A final
head maps edge encodings to one logit per edge.

All parameters live in one contiguous buffer (``ModelParams.flat``); the
named weight arrays are views into it, in a fixed registration order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import (
    IndexPlan,
    Tape,
    Tensor,
    activation,
    bce_with_logits,
    concat_cols,
    gather_rows,
    linear,
    scatter_add,
)
from .sparse import CooMatrix

CHECKPOINT_MAGIC = b"SHTRKCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class IgnnArchitecture:
    layers: int = 8
    hidden: int = 64
    mlp_depth: int = 2
    node_in: int = 6
    edge_in: int = 2
    activation: str = "relu"
    output_activation: str = "tanh"

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.mlp_depth < 1:
            raise ValueError("layers, hidden and mlp_depth must be >= 1")
        if self.node_in < 1 or self.edge_in < 1:
            raise ValueError("input widths must be >= 1")

    def mlps(self) -> list[tuple[str, int, int, str]]:
        """(name, input width, output width, output activation) in registration order."""
        f = self.hidden
        out = [
            ("node_encoder", self.node_in, f, self.output_activation),
            ("edge_encoder", self.edge_in, f, self.output_activation),
        ]
        for l in range(self.layers):
            out.append((f"message.{l}", 6 * f, f, self.output_activation))
            out.append((f"node_update.{l}", 4 * f, f, self.output_activation))
        out.append(("head", 2 * f, 1, "identity"))
        return out


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, int]
    offset: int

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]


def _manifest(arch: IgnnArchitecture) -> list[ParamSpec]:
    specs, offset = [], 0
    for name, width_in, width_out, _ in arch.mlps():
        widths = [width_in] + [arch.hidden] * arch.mlp_depth + [width_out]
        for i, (p, q) in enumerate(zip(widths[:-1], widths[1:])):
            for suffix, shape in (("weight", (p, q)), ("bias", (1, q))):
                specs.append(ParamSpec(f"{name}.{i}.{suffix}", shape, offset))
                offset += shape[0] * shape[1]
    return specs


@dataclass(eq=False)
class ModelParams:
    arch: IgnnArchitecture
    flat: np.ndarray
    manifest: list[ParamSpec] = field(init=False)
    arrays: dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        self.manifest = _manifest(self.arch)
        total = sum(s.size for s in self.manifest)
        if self.flat.shape != (total,) or self.flat.dtype != np.float64:
            raise ValueError(f"flat buffer must be float64 of length {total}")
        self.arrays = {
            s.name: self.flat[s.offset : s.offset + s.size].reshape(s.shape) for s in self.manifest
        }

    @property
    def size(self) -> int:
        return self.flat.size

    def names(self) -> list[str]:
        return [s.name for s in self.manifest]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.flat.copy())

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a tape leaf (no copies)."""
        return {name: tape.leaf(arr, name) for name, arr in self.arrays.items()}


def init_params(arch: IgnnArchitecture, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    params = ModelParams(arch, np.zeros(sum(s.size for s in _manifest(arch))))
    for spec in params.manifest:
        if spec.name.endswith(".weight"):
            fan_in, fan_out = spec.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params.arrays[spec.name][...] = rng.uniform(-limit, limit, size=spec.shape)
    return params


def _mlp(weights: Mapping[str, Tensor], name: str, x: Tensor, depth: int, hidden_act: str, out_act: str) -> Tensor:
    h = x
    for i in range(depth + 1):
        h = linear(h, weights[f"{name}.{i}.weight"], weights[f"{name}.{i}.bias"])
        h = activation(h, hidden_act if i < depth else out_act)
    return h


def ignn_forward(
    adj: CooMatrix,
    x,
    y,
    params: ModelParams,
    tape: Tape | None = None,
    weights: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Edge logits (m x 1) for the graph ``adj`` with node/edge inputs x, y.

    Parameters are bound to ``tape`` unless already-bound ``weights`` are
    passed. Without a tape the pass is inference-only.
    """
    n, m = adj.n_rows, adj.nnz
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    arch = params.arch
    if weights is None:
        weights = params.bind(tape) if tape is not None else {k: Tensor(v) for k, v in params.arrays.items()}
    if x.shape != (n, arch.node_in):
        raise ValueError(f"node features {x.shape} do not match ({n}, {arch.node_in})")
    if y.shape != (m, arch.edge_in):
        raise ValueError(f"edge features {y.shape} do not match ({m}, {arch.edge_in})")
    rows, cols = IndexPlan(adj.rows, n), IndexPlan(adj.cols, n)
    mlp_acts = {name: out for name, _, _, out in arch.mlps()}

    def phi(name, h):
        return _mlp(weights, name, h, arch.mlp_depth, arch.activation, mlp_acts[name])

    x0 = phi("node_encoder", x)
    y0 = phi("edge_encoder", y)
    xl, yl = x0, y0
    if tape is not None:
        tape.mark("encoders")
    for l in range(arch.layers):
        xp = concat_cols([xl, x0])
        yp = concat_cols([yl, y0])
        yl = phi(f"message.{l}", concat_cols([yp, gather_rows(xp, rows), gather_rows(xp, cols)]))
        m_src = scatter_add(yl, rows, n)
        m_dst = scatter_add(yl, cols, n)
        xl = phi(f"node_update.{l}", concat_cols([m_src, m_dst, xp]))
        if tape is not None:
            tape.mark(f"layer.{l}")
    return phi("head", concat_cols([yl, y0]))


def layer_retained_elements(tape: Tape, layers: int) -> list[int]:
    """Activation elements each message-passing round left on the tape."""
    prev = tape.marks["encoders"]
    out = []
    for l in range(layers):
        cur = tape.marks[f"layer.{l}"]
        out.append(cur - prev)
        prev = cur
    return out


def flatten_grads(grads: Mapping[str, np.ndarray], params: ModelParams, out: np.ndarray | None = None) -> np.ndarray:
    """Copy per-parameter gradients into one buffer in registration order."""
    buf = np.empty(params.size) if out is None else out
    for spec in params.manifest:
        if spec.name not in grads:
            raise KeyError(f"missing gradient for parameter {spec.name}")
        buf[spec.offset : spec.offset + spec.size] = np.asarray(grads[spec.name]).reshape(-1)
    return buf


def unflatten_grads(buf: np.ndarray, params: ModelParams) -> dict[str, np.ndarray]:
    if buf.shape != (params.size,):
        raise ValueError("gradient buffer length does not match the parameters")
    return {s.name: buf[s.offset : s.offset + s.size].reshape(s.shape) for s in params.manifest}


def loss_and_grad(
    params: ModelParams,
    adj: CooMatrix,
    x: np.ndarray,
    y: np.ndarray,
    labels: np.ndarray,
    pos_weight: float = 1.0,
    edge_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean edge BCE and its gradient as a flat buffer."""
    tape = Tape()
    weights = params.bind(tape)
    logits = ignn_forward(adj, x, y, params, tape, weights)
    loss = bce_with_logits(logits, labels, pos_weight, edge_weights)
    grads = tape.backward(loss)
    flat = np.empty(params.size)
    for spec in params.manifest:
        flat[spec.offset : spec.offset + spec.size] = grads[weights[spec.name]].reshape(-1)
    return float(loss.data[0, 0]), flat


def predict_logits(params: ModelParams, adj: CooMatrix, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return ignn_forward(adj, x, y, params).data.reshape(-1)


def save_checkpoint(path, params: ModelParams) -> None:
    """Magic, version, JSON header (architecture + manifest), raw float64 LE."""
    header = {
        "architecture": asdict(params.arch),
        "manifest": [{"name": s.name, "shape": list(s.shape), "offset": s.offset} for s in params.manifest],
        "size": params.size,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen])
    arch = IgnnArchitecture(**header["architecture"])
    body = raw[start + hlen :]
    if len(body) != 8 * header["size"]:
        raise ValueError(f"{path}: truncated parameter block")
    params = ModelParams(arch, np.frombuffer(body, dtype="<f8").astype(np.float64))
    expected = [(s.name, list(s.shape), s.offset) for s in params.manifest]
    if expected != [(e["name"], e["shape"], e["offset"]) for e in header["manifest"]]:
        raise ValueError(f"{path}: manifest does not match architecture")
    return params
