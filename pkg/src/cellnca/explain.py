"""Layer-wise relevance propagation over the classifier head.

Relevance starts as the target-class logit and is pushed back through the
two fully connected layers with the epsilon rule. Biases take no share,
so at ``epsilon=0`` every layer's relevance sums to that logit. From the
pooled features it is then placed on the winning cell of each channel,
which mirrors how the channel max routes gradients. That last step goes
beyond the classifier head and is labelled as such in the exported files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ExportError, ShapeError

ROUTING_NOTE = "winner-take-all routing through channel max (extension beyond the classifier head)"


def _signed(z):
    return np.where(z >= 0, 1.0, -1.0)


def lrp_linear(a, W, relevance_out, epsilon=0.0):
    """Epsilon-rule redistribution through one linear layer ``z = W @ a``.

    ``R_j = sum_k a_j W[k, j] / (z_k + eps * sign(z_k)) * R_k``; ``epsilon=None``
    uses ``1e-6 * mean |z|``. Outputs whose stabilized denominator is exactly
    zero pass no relevance.
    """
    a = np.asarray(a, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    relevance_out = np.asarray(relevance_out, dtype=np.float64)
    if W.shape != (relevance_out.shape[0], a.shape[0]):
        raise ShapeError(f"lrp: weight {W.shape} does not map {a.shape} to {relevance_out.shape}")
    z = W @ a
    if epsilon is None:
        epsilon = 1e-6 * float(np.mean(np.abs(z)))
    denom = z + epsilon * _signed(z)
    safe = np.where(denom == 0, 1.0, denom)
    s = np.where(denom == 0, 0.0, relevance_out / safe)
    return a * (W.T @ s), epsilon


@dataclass
class RelevanceVector:
    relevance: np.ndarray         # per pooled feature
    hidden_relevance: np.ndarray  # per classifier hidden unit
    target_class: int
    logit: float
    epsilon: float | None
    epsilons: tuple = ()          # effective value per layer, output side first

    @property
    def total(self):
        return float(self.relevance.sum())


def lrp_epsilon(features, params, target_class, epsilon=None, hidden=None):
    """Relevance of each pooled feature for ``target_class``.

    ``hidden`` optionally supplies the stored post-ReLU activations of the
    classifier's hidden layer; they are recomputed from ``features`` otherwise.
    """
    if features is None:
        raise ShapeError("lrp needs the pooled features of a completed forward pass")
    v = np.asarray(features, dtype=np.float64)
    W3, b3 = params.W3.astype(np.float64), params.b3.astype(np.float64)
    W4, b4 = params.W4.astype(np.float64), params.b4.astype(np.float64)
    if v.shape != (W3.shape[1],):
        raise ShapeError(f"features {v.shape} do not match classifier input {W3.shape[1]}")
    if not 0 <= target_class < W4.shape[0]:
        raise ShapeError(f"target class {target_class} outside [0, {W4.shape[0]})")
    a1 = np.maximum(W3 @ v + b3, 0) if hidden is None else np.asarray(hidden, dtype=np.float64)
    logits = W4 @ a1 + b4
    seed = np.zeros_like(logits)
    seed[target_class] = logits[target_class]
    r_hidden, eps2 = lrp_linear(a1, W4, seed, epsilon)
    r_features, eps1 = lrp_linear(v, W3, r_hidden, epsilon)
    return RelevanceVector(r_features, r_hidden, int(target_class), float(logits[target_class]),
                           epsilon, (eps2, eps1))


@dataclass
class ChannelRelevance:
    channel: int
    cell: tuple
    relevance: float
    activation: np.ndarray  # (H, W) final-state slice


@dataclass
class RelevanceMap:
    channels: list  # ChannelRelevance, descending relevance
    shape: tuple    # (H, W, n)

    def top(self, k):
        return self.channels[:k]

    def dense(self):
        """``(H, W, n)`` array holding each channel's relevance at its winning cell."""
        out = np.zeros(self.shape)
        for ch in self.channels:
            out[ch.cell[0], ch.cell[1], ch.channel] = ch.relevance
        return out

    @property
    def total(self):
        return float(sum(ch.relevance for ch in self.channels))


def route_to_cells(relevance, final_state, argmax_pos):
    """Place every feature's relevance on its channel's winning cell.

    Channels come out sorted by descending relevance; ties keep channel order.
    """
    final_state = np.asarray(final_state)
    argmax_pos = np.asarray(argmax_pos)
    r = relevance.relevance if isinstance(relevance, RelevanceVector) else np.asarray(relevance)
    n = final_state.shape[-1]
    if r.shape != (n,) or argmax_pos.shape != (n, 2):
        raise ShapeError(f"relevance {r.shape} / positions {argmax_pos.shape} do not fit {n} channels")
    order = np.argsort(-r, kind="stable")
    channels = [
        ChannelRelevance(int(c), (int(argmax_pos[c, 0]), int(argmax_pos[c, 1])), float(r[c]),
                         final_state[..., c])
        for c in order
    ]
    return RelevanceMap(channels, final_state.shape)


def normalize_channel(grid):
    """Min-max scale to [0, 255] uint8; a constant grid maps to zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if not hi > lo:
        return np.zeros(grid.shape, np.uint8)
    return np.round((grid - lo) / (hi - lo) * 255).astype(np.uint8)


def export_heatmaps(rmap, top_k, out_dir):
    """Write ``top_k`` channel PNGs, a composite row and ``relevance.tsv``.

    Returns the list of written paths.
    """
    if not 0 < top_k <= len(rmap.channels):
        raise ShapeError(f"top_k must lie in [1, {len(rmap.channels)}], got {top_k}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        tiles = []
        for rank, ch in enumerate(rmap.top(top_k)):
            tile = normalize_channel(ch.activation)
            tiles.append(tile)
            path = out_dir / f"rank{rank:02d}_channel{ch.channel:03d}.png"
            Image.fromarray(tile, "L").save(path)
            written.append(path)
        gap = np.zeros((tiles[0].shape[0], 2), np.uint8)
        row = np.concatenate([piece for t in tiles for piece in (t, gap)][:-1], axis=1)
        composite = out_dir / "composite.png"
        Image.fromarray(row, "L").save(composite)
        written.append(composite)
        sidecar = out_dir / "relevance.tsv"
        lines = [f"# {ROUTING_NOTE}\n", "channel\trelevance\trow\tcol\n"]
        lines += [f"{ch.channel}\t{ch.relevance!r}\t{ch.cell[0]}\t{ch.cell[1]}\n" for ch in rmap.top(top_k)]
        sidecar.write_text("".join(lines), encoding="utf-8")
        written.append(sidecar)
    except OSError as exc:
        raise ExportError(f"cannot write explanation files to {out_dir}: {exc}") from exc
    return written
