"""The searchable network: shared full-size weights plus per-layer shrink choices.

A layer starts with T filters over C input channels.  Shrinking keeps the
first M filters; for stride-1 layers, every removed filter i whose input
channel i exists is replaced by that input channel routed straight through
(channel-level bypass), so the output channel count is Z = max(min(C, T), M)
and never reaches zero.  During training the full-size tensors are kept and
per-image prefix masks zero the dropped filter outputs while the complement
mask admits the bypassed inputs; at evaluation the same sub-network is
realized by slicing the first M filters, the first C_in input channels and
the centered k x k kernel window.  Both paths compute the same function.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import GridError, ShapeError, StateError

ARCHITECTURE_FORMAT = "netshrink-architecture-v1"


# ---------------------------------------------------------------------------
# channel arithmetic
# ---------------------------------------------------------------------------

class ChannelSource(NamedTuple):
    """Where an output channel comes from: a kept filter or a bypassed input."""

    origin: Literal["filter", "input"]
    index: int


def cbc_output_channels(c: int, t: int, m: int) -> int:
    """Output channel count Z = max(min(C, T), M) of a bypass-connected layer."""
    if c < 1 or t < 1:
        raise GridError(f"C and T must be >= 1, got C={c}, T={t}")
    if not 0 <= m <= t:
        raise GridError(f"M must lie in [0, T={t}], got M={m}")
    return max(min(c, t), m)


def bypass_channel_map(c: int, t: int, m: int) -> list[ChannelSource]:
    """Source of each of the Z output channels after removing filters M..T-1.

    Channels below M are kept filters; removed filter i is replaced by input
    channel i when that input exists (i < C), so bypassed inputs occupy
    indices M..min(C, T).
    """
    z = cbc_output_channels(c, t, m)
    sources = [ChannelSource("filter", j) for j in range(m)]
    sources += [ChannelSource("input", j) for j in range(m, min(c, t))]
    assert len(sources) == z
    return sources


@dataclass(frozen=True)
class ChannelMask:
    """Prefix mask over `length` channels: the first `ones_prefix` are kept."""

    length: int
    ones_prefix: int

    def __post_init__(self):
        if not 0 <= self.ones_prefix <= self.length:
            raise GridError(
                f"ones_prefix must lie in [0, {self.length}], got {self.ones_prefix}"
            )

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return (np.arange(self.length) < self.ones_prefix).astype(dtype)

    def complement_array(self, dtype=np.float32) -> np.ndarray:
        return (np.arange(self.length) >= self.ones_prefix).astype(dtype)


def ordered_dropout_mask(m: int, total: int) -> ChannelMask:
    """Prefix mask keeping the first m of `total` channels (zeros the rest)."""
    if not 0 <= m <= total:
        raise GridError(f"width {m} outside [0, {total}]")
    return ChannelMask(length=total, ones_prefix=m)


def sample_width_assignments(n: int, width_grid: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Assign one grid width to each of n images, each width near-equally often.

    Counts across the grid differ by at most one; which widths get the
    remainder, and the assignment order, are randomized.
    """
    grid = np.asarray(width_grid)
    if n < 1 or grid.size == 0:
        raise GridError(f"need n >= 1 and a nonempty grid, got n={n}, grid={width_grid}")
    base, rem = divmod(n, grid.size)
    counts = np.full(grid.size, base)
    if rem:
        counts[rng.choice(grid.size, size=rem, replace=False)] += 1
    widths = np.repeat(grid, counts)
    rng.shuffle(widths)
    return widths


# ---------------------------------------------------------------------------
# superkernel
# ---------------------------------------------------------------------------

def kernel_window(full: int, k: int) -> slice:
    """Slice selecting the centered k x k window of a full x full kernel."""
    if k % 2 == 0 or not 3 <= k <= full:
        raise GridError(f"kernel size must be odd and in [3, {full}], got {k}")
    off = (full - k) // 2
    return slice(off, off + k)


def superkernel_mask(weights: np.ndarray, k: int) -> np.ndarray:
    """Zero all kernel taps outside the centered k x k window."""
    full = weights.shape[-1]
    if k == full:
        return weights
    win = kernel_window(full, k)
    mask = np.zeros((full, full), dtype=weights.dtype)
    mask[win, win] = 1.0
    return weights * mask


# ---------------------------------------------------------------------------
# layer specs and choices
# ---------------------------------------------------------------------------

def default_width_grid(t: int, stride: int, points: int = 9) -> tuple[int, ...]:
    """Uniformly spaced widths from 0 to T, rounded, de-duplicated.

    Stride > 1 layers cannot bypass their inputs, so 0 is dropped there.
    """
    grid = sorted({int(round(v)) for v in np.linspace(0.0, t, points)})
    if stride > 1 and grid[0] == 0:
        grid = grid[1:]
    return tuple(grid)


def default_kernel_grid(k_max: int) -> tuple[int, ...]:
    return tuple(range(3, k_max + 1, 2))


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one searchable layer."""

    index: int
    c: int
    t: int
    k_max: int
    stride: int = 1
    width_grid: tuple[int, ...] = ()
    kernel_grid: tuple[int, ...] = ()
    kind: str = "conv"

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise GridError(f"layer {self.index}: kind must be conv or dense, got {self.kind!r}")
        if self.c < 1 or self.t < 1:
            raise GridError(f"layer {self.index}: C and T must be >= 1, got C={self.c}, T={self.t}")
        if self.k_max % 2 == 0 or self.k_max < 3:
            raise GridError(f"layer {self.index}: max kernel must be odd and >= 3, got {self.k_max}")
        if self.stride not in (1, 2):
            raise GridError(f"layer {self.index}: stride must be 1 or 2, got {self.stride}")
        if not self.width_grid:
            object.__setattr__(self, "width_grid", default_width_grid(self.t, self.stride))
        if not self.kernel_grid:
            object.__setattr__(self, "kernel_grid", default_kernel_grid(self.k_max))
        wg, kg = self.width_grid, self.kernel_grid
        if tuple(sorted(set(wg))) != tuple(wg):
            raise GridError(f"layer {self.index}: width grid must be sorted and unique, got {wg}")
        if any(not 0 <= m <= self.t for m in wg):
            raise GridError(f"layer {self.index}: width grid {wg} outside [0, T={self.t}]")
        if self.t not in wg:
            raise GridError(f"layer {self.index}: width grid {wg} must contain T={self.t}")
        if 0 in wg and self.stride != 1:
            raise GridError(f"layer {self.index}: width 0 (layer removal) needs stride 1")
        if tuple(sorted(set(kg))) != tuple(kg):
            raise GridError(f"layer {self.index}: kernel grid must be sorted and unique, got {kg}")
        if any(k % 2 == 0 or not 3 <= k <= self.k_max for k in kg):
            raise GridError(f"layer {self.index}: kernel grid {kg} outside odd [3, {self.k_max}]")
        if self.k_max not in kg:
            raise GridError(f"layer {self.index}: kernel grid {kg} must contain K={self.k_max}")

    @property
    def min_ct(self) -> int:
        return min(self.c, self.t)

    @property
    def bypass_enabled(self) -> bool:
        return self.stride == 1

    def output_channels(self, m: int) -> int:
        """Nominal output channel count Z of this layer under width m."""
        if self.bypass_enabled:
            return cbc_output_channels(self.c, self.t, m)
        if m < 1:
            raise GridError(f"layer {self.index}: stride {self.stride} cannot take width 0")
        return m

    def validate_choice(self, m: int, k: int) -> None:
        if m not in self.width_grid:
            raise GridError(f"layer {self.index}: width {m} not in grid {self.width_grid}")
        if m > 0 and k not in self.kernel_grid:
            raise GridError(f"layer {self.index}: kernel {k} not in grid {self.kernel_grid}")


@dataclass(frozen=True)
class SubNetChoice:
    """Per-layer (filters kept, kernel size) pairs; the search's decision variable."""

    pairs: tuple[tuple[int, int], ...]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(m for m, _ in self.pairs)

    @property
    def kernels(self) -> tuple[int, ...]:
        return tuple(k for _, k in self.pairs)

    def replace(self, index: int, m: int, k: int) -> "SubNetChoice":
        pairs = list(self.pairs)
        pairs[index] = (m, k)
        return SubNetChoice(tuple(pairs))

    def key(self) -> tuple:
        # layers with width 0 ignore the kernel; canonicalize so hashing agrees
        return tuple((m, k if m > 0 else 0) for m, k in self.pairs)


def full_width_choice(specs: Sequence[LayerSpec]) -> SubNetChoice:
    return SubNetChoice(tuple((s.t, s.k_max) for s in specs))


def channel_flow(specs: Sequence[LayerSpec], choice: SubNetChoice) -> list[int]:
    """Real channel counts along the network under `choice`.

    Entry i is what layer i actually receives at evaluation time.  This can
    sit below the per-layer Z = max(min(C, T), M) once an upstream layer both
    expands (T > C) and is shrunk below T: the channels Z counts beyond the
    real ones are identically zero in the masked training tensors, form a
    suffix, and are simply never materialized on the sliced path.
    """
    flow = [specs[0].c]
    r = specs[0].c
    for spec, (m, _) in zip(specs, choice.pairs):
        r = max(m, min(r, spec.min_ct)) if spec.bypass_enabled else m
        flow.append(r)
    return flow


def spatial_flow(specs: Sequence[LayerSpec], input_hw: tuple[int, int]) -> list[tuple[int, int]]:
    """Spatial extents entering each layer, plus the final output extent."""
    h, w = input_hw
    sizes = [(h, w)]
    for spec in specs:
        h = -(-h // spec.stride)
        w = -(-w // spec.stride)
        sizes.append((h, w))
    return sizes


# ---------------------------------------------------------------------------
# the super-network
# ---------------------------------------------------------------------------

def _he_conv(rng: np.random.Generator, t: int, c: int, k: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (c * k * k))
    return (rng.standard_normal((t, c, k, k)) * std).astype(dtype)


class SuperNetwork:
    """Shared full-size weights; every sub-network is a prefix slice of them."""

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        input_hw: tuple[int, int],
        classes: int,
        rng: np.random.Generator | None = None,
        dtype=T.DEFAULT_DTYPE,
    ):
        if not specs:
            raise GridError("a super-network needs at least one layer")
        if [s.index for s in specs] != list(range(len(specs))):
            raise GridError(
                f"layer indices must run 0..{len(specs) - 1} in order, "
                f"got {[s.index for s in specs]}"
            )
        for prev, cur in zip(specs, specs[1:]):
            if cur.c != prev.t:
                raise GridError(
                    f"layer {cur.index}: expects C={cur.c} input channels but "
                    f"layer {prev.index} emits T={prev.t} at full width"
                )
        for spec, (h, w) in zip(specs, spatial_flow(specs, input_hw)[:-1]):
            if min(h, w) < spec.k_max:
                raise GridError(
                    f"layer {spec.index}: spatial extent {h}x{w} smaller than "
                    f"max kernel {spec.k_max}"
                )
        if classes < 2:
            raise GridError(f"need >= 2 classes, got {classes}")
        if any(s.kind != "conv" for s in specs):
            raise GridError("searchable layers must be conv; the head is a dense classifier")
        rng = rng or np.random.default_rng(0)
        self.specs = list(specs)
        self.input_hw = tuple(input_hw)
        self.classes = classes
        self.weights: list[T.Parameter] = []
        self.biases: list[T.Parameter] = []
        for s in specs:
            self.weights.append(
                T.Parameter(_he_conv(rng, s.t, s.c, s.k_max, dtype), f"layer{s.index}.weight")
            )
            self.biases.append(T.Parameter(np.zeros(s.t, dtype=dtype), f"layer{s.index}.bias"))
        feat = specs[-1].t
        head_std = np.sqrt(2.0 / feat)
        self.head_w = T.Parameter(
            (rng.standard_normal((classes, feat)) * head_std).astype(dtype), "head.weight"
        )
        self.head_b = T.Parameter(np.zeros(classes, dtype=dtype), "head.bias")
        self._cache: dict | None = None

    # -- basics -------------------------------------------------------------

    def parameters(self) -> list[T.Parameter]:
        return [*self.weights, *self.biases, self.head_w, self.head_b]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def full_choice(self) -> SubNetChoice:
        return full_width_choice(self.specs)

    def validate_choice(self, choice: SubNetChoice) -> None:
        if len(choice.pairs) != len(self.specs):
            raise GridError(
                f"choice has {len(choice.pairs)} layers, network has {len(self.specs)}"
            )
        for spec, (m, k) in zip(self.specs, choice.pairs):
            spec.validate_choice(m, k)

    # -- one layer, both modes ------------------------------------------------

    def forward_layer(
        self,
        index: int,
        x: np.ndarray,
        m,
        k: int,
        training: bool = False,
    ):
        """Run layer `index` under width m and kernel k.

        Training mode keeps full-size tensors and applies per-image prefix
        masks (m may be a per-image vector); eval mode takes the sliced
        sub-network path.  Returns (out, cache); cache is None in eval mode.
        """
        if training:
            m_vec = np.full(x.shape[0], m) if np.ndim(m) == 0 else np.asarray(m)
            return self._layer_train(index, x, m_vec, k)
        if np.ndim(m) != 0:
            raise GridError("eval mode takes a single width, not per-image widths")
        return self._layer_eval(index, x, int(m), k), None

    def _layer_train(self, index: int, x: np.ndarray, widths: np.ndarray, k: int):
        spec = self.specs[index]
        if x.shape[1] != spec.c:
            raise ShapeError(
                f"layer {spec.index}: training input axis 1 has {x.shape[1]} "
                f"channels, spec says {spec.c}"
            )
        w_eff = superkernel_mask(self.weights[index].value, k)
        y = T.conv2d_forward(x, w_eff, spec.stride) + self.biases[index].value[None, :, None, None]
        a = T.relu(y)
        mask = (np.arange(spec.t)[None, :] < widths[:, None]).astype(x.dtype)
        out = a * mask[:, :, None, None]
        comp = None
        if spec.bypass_enabled:
            mct = spec.min_ct
            comp = (np.arange(mct)[None, :] >= widths[:, None]).astype(x.dtype)
            out[:, :mct] += x[:, :mct] * comp[:, :, None, None]
        cache = {"index": index, "x": x, "y": y, "k": k, "mask": mask, "comp": comp}
        return out, cache

    def _layer_backward(self, dout: np.ndarray, cache: dict) -> np.ndarray:
        index = cache["index"]
        spec = self.specs[index]
        x, y, k = cache["x"], cache["y"], cache["k"]
        da = dout * cache["mask"][:, :, None, None]
        dy = da * (y > 0)
        w_eff = superkernel_mask(self.weights[index].value, k)
        dx, dw = T.conv2d_backward(dy, x, w_eff, spec.stride)
        self.weights[index].grad += superkernel_mask(dw, k)
        self.biases[index].grad += dy.sum(axis=(0, 2, 3))
        if spec.bypass_enabled:
            mct = spec.min_ct
            dx[:, :mct] += dout[:, :mct] * cache["comp"][:, :, None, None]
        return dx

    def _layer_eval(self, index: int, x: np.ndarray, m: int, k: int) -> np.ndarray:
        spec = self.specs[index]
        z_in = x.shape[1]
        if z_in > spec.c:
            raise ShapeError(
                f"layer {spec.index}: eval input axis 1 has {z_in} channels, "
                f"spec allows at most {spec.c}"
            )
        if not spec.bypass_enabled and m < 1:
            raise GridError(f"layer {spec.index}: stride {spec.stride} cannot take width 0")
        parts = []
        if m > 0:
            win = kernel_window(spec.k_max, k) if k < spec.k_max else slice(None)
            w = self.weights[index].value[:m, :z_in, win, win]
            y = T.conv2d_forward(x, w, spec.stride) + self.biases[index].value[:m][None, :, None, None]
            parts.append(T.relu(y))
        if spec.bypass_enabled and m < min(z_in, spec.min_ct):
            parts.append(x[:, m : min(z_in, spec.min_ct)])
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)

    # -- whole network --------------------------------------------------------

    def forward_train(self, x: np.ndarray, widths: np.ndarray, kernels: Sequence[int]) -> np.ndarray:
        """Full-size forward with per-image widths [N, L] and per-layer kernels [L]."""
        widths = np.asarray(widths)
        if widths.shape != (x.shape[0], len(self.specs)):
            raise ShapeError(
                f"widths must be [batch={x.shape[0]}, layers={len(self.specs)}], "
                f"got {widths.shape}"
            )
        caches = []
        out = x
        for i in range(len(self.specs)):
            out, cache = self._layer_train(i, out, widths[:, i], kernels[i])
            caches.append(cache)
        feat = T.global_avg_pool(out)
        logits = T.dense_forward(feat, self.head_w.value) + self.head_b.value
        self._cache = {"caches": caches, "feat": feat, "conv_shape": out.shape}
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients for the last recorded forward pass."""
        if self._cache is None:
            raise StateError("backward called before forward_train recorded a pass")
        cache = self._cache
        self._cache = None
        self.head_w.grad += dlogits.T @ cache["feat"]
        self.head_b.grad += dlogits.sum(axis=0)
        dfeat = T.dense_backward(dlogits, cache["feat"], self.head_w.value)[0]
        dout = T.global_avg_pool_backward(dfeat, cache["conv_shape"])
        for layer_cache in reversed(cache["caches"]):
            dout = self._layer_backward(dout, layer_cache)

    def forward_eval(self, x: np.ndarray, choice: SubNetChoice) -> np.ndarray:
        """Sliced sub-network forward; never touches the dropped weights."""
        self.validate_choice(choice)
        out = x
        for i, (m, k) in enumerate(choice.pairs):
            out = self._layer_eval(i, out, m, k)
        feat = T.global_avg_pool(out)
        z = feat.shape[1]
        return T.dense_forward(feat, self.head_w.value[:, :z]) + self.head_b.value

    def evaluate(
        self, images: np.ndarray, labels: np.ndarray, choice: SubNetChoice, batch_size: int = 256
    ) -> float:
        """Deterministic top-1 accuracy of the sliced sub-network; read-only."""
        hits = 0
        for lo in range(0, images.shape[0], batch_size):
            logits = self.forward_eval(images[lo : lo + batch_size], choice)
            hits += int((logits.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
        return hits / images.shape[0]

    # -- export ----------------------------------------------------------------

    def architecture_json(self, choice: SubNetChoice) -> list[dict]:
        """Ordered layer dicts {index, kind, C, T, M, k, stride} plus the head row."""
        self.validate_choice(choice)
        rows = []
        for spec, (m, k) in zip(self.specs, choice.pairs):
            rows.append(
                {
                    "index": spec.index,
                    "kind": spec.kind,
                    "C": spec.c,
                    "T": spec.t,
                    "M": m,
                    "k": k if m > 0 else 0,
                    "stride": spec.stride,
                }
            )
        rows.append(
            {
                "index": len(self.specs),
                "kind": "dense",
                "C": self.specs[-1].t,
                "T": self.classes,
                "M": self.classes,
                "k": 1,
                "stride": 1,
            }
        )
        return rows

    def fingerprint(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "classes": self.classes,
            "layers": [
                {
                    "index": s.index,
                    "C": s.c,
                    "T": s.t,
                    "K": s.k_max,
                    "stride": s.stride,
                    "width_grid": list(s.width_grid),
                    "kernel_grid": list(s.kernel_grid),
                }
                for s in self.specs
            ],
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in tensors:
                raise ShapeError(f"checkpoint is missing tensor {p.name!r}")
            if tensors[p.name].shape != p.value.shape:
                raise ShapeError(
                    f"tensor {p.name!r}: checkpoint shape {tensors[p.name].shape} "
                    f"!= network shape {p.value.shape}"
                )
            p.value = tensors[p.name].astype(p.value.dtype)
            p.grad = np.zeros_like(p.value)

    def save(self, path: str | Path) -> None:
        T.save_checkpoint(path, self.state_dict(), meta={"network": self.fingerprint()})

    def load(self, path: str | Path) -> None:
        tensors, meta = T.load_checkpoint(path)
        if meta.get("network") != self.fingerprint():
            raise ShapeError(
                "checkpoint network fingerprint does not match this network spec"
            )
        self.load_state_dict(tensors)

    # -- extraction --------------------------------------------------------------

    def extract(self, choice: SubNetChoice) -> "SubNetwork":
        """Materialize the chosen sub-network with copied weight slices."""
        self.validate_choice(choice)
        flow = channel_flow(self.specs, choice)
        layers = []
        for i, (spec, (m, k)) in enumerate(zip(self.specs, choice.pairs)):
            z_in, z_out = flow[i], flow[i + 1]
            if m == 0 and z_out == z_in:
                continue  # full identity: drop the layer, channel count unchanged
            if m > 0:
                win = kernel_window(spec.k_max, k) if k < spec.k_max else slice(None)
                weight = T.Parameter(
                    self.weights[i].value[:m, :z_in, win, win].copy(), f"layer{spec.index}.weight"
                )
                bias = T.Parameter(self.biases[i].value[:m].copy(), f"layer{spec.index}.bias")
            else:
                weight = bias = None
            layers.append(
                EvalLayer(
                    spec=spec,
                    m=m,
                    k=k if m > 0 else 0,
                    z_in=z_in,
                    z_out=z_out,
                    weight=weight,
                    bias=bias,
                )
            )
        z_last = flow[-1]
        head_w = T.Parameter(self.head_w.value[:, :z_last].copy(), "head.weight")
        head_b = T.Parameter(self.head_b.value.copy(), "head.bias")
        return SubNetwork(layers, head_w, head_b, choice=choice, specs=tuple(self.specs))


# ---------------------------------------------------------------------------
# standalone extracted networks
# ---------------------------------------------------------------------------

@dataclass
class EvalLayer:
    """One materialized layer of an extracted sub-network."""

    spec: LayerSpec
    m: int
    k: int
    z_in: int
    z_out: int
    weight: T.Parameter | None
    bias: T.Parameter | None


class SubNetwork:
    """A discovered architecture with its own weights; trainable on its own."""

    def __init__(
        self,
        layers: list[EvalLayer],
        head_w: T.Parameter,
        head_b: T.Parameter,
        choice: SubNetChoice | None = None,
        specs: tuple[LayerSpec, ...] | None = None,
    ):
        self.layers = layers
        self.head_w = head_w
        self.head_b = head_b
        self.choice = choice
        self.specs = specs
        self._cache: dict | None = None

    def parameters(self) -> list[T.Parameter]:
        ps = []
        for l in self.layers:
            if l.weight is not None:
                ps += [l.weight, l.bias]
        return ps + [self.head_w, self.head_b]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _layer_forward(self, layer: EvalLayer, x: np.ndarray):
        spec = layer.spec
        parts, y = [], None
        if layer.m > 0:
            y = (
                T.conv2d_forward(x, layer.weight.value, spec.stride)
                + layer.bias.value[None, :, None, None]
            )
            parts.append(T.relu(y))
        if spec.bypass_enabled and layer.m < min(x.shape[1], spec.min_ct):
            parts.append(x[:, layer.m : min(x.shape[1], spec.min_ct)])
        out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        return out, y

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        caches = []
        out = x
        for layer in self.layers:
            if out.shape[1] != layer.z_in:
                raise ShapeError(
                    f"layer {layer.spec.index}: expected {layer.z_in} input channels, "
                    f"got {out.shape[1]} on axis 1"
                )
            nxt, y = self._layer_forward(layer, out)
            if record:
                caches.append({"x": out, "y": y})
            out = nxt
        feat = T.global_avg_pool(out)
        logits = T.dense_forward(feat, self.head_w.value) + self.head_b.value
        if record:
            self._cache = {"caches": caches, "feat": feat, "conv_shape": out.shape}
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        if self._cache is None:
            raise StateError("backward called before a recorded forward pass")
        cache = self._cache
        self._cache = None
        self.head_w.grad += dlogits.T @ cache["feat"]
        self.head_b.grad += dlogits.sum(axis=0)
        dfeat = T.dense_backward(dlogits, cache["feat"], self.head_w.value)[0]
        dout = T.global_avg_pool_backward(dfeat, cache["conv_shape"])
        for layer, lc in zip(reversed(self.layers), reversed(cache["caches"])):
            dout = self._layer_backward(layer, dout, lc)

    def _layer_backward(self, layer: EvalLayer, dout: np.ndarray, lc: dict) -> np.ndarray:
        spec = layer.spec
        x = lc["x"]
        dx = np.zeros_like(x)
        if layer.m > 0:
            dy = dout[:, : layer.m] * (lc["y"] > 0)
            dxc, dw = T.conv2d_backward(dy, x, layer.weight.value, spec.stride)
            dx += dxc
            layer.weight.grad += dw
            layer.bias.grad += dy.sum(axis=(0, 2, 3))
        hi = min(x.shape[1], spec.min_ct) if spec.bypass_enabled else 0
        if layer.m < hi:
            dx[:, layer.m : hi] += dout[:, layer.m : hi]
        return dx

    def evaluate(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
        hits = 0
        for lo in range(0, images.shape[0], batch_size):
            logits = self.forward(images[lo : lo + batch_size])
            hits += int((logits.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
        return hits / images.shape[0]

    def shrink_to(self, choice: SubNetChoice) -> "SubNetwork":
        """New sub-network for a weakly smaller choice, reusing overlapping weights."""
        if self.specs is None or self.choice is None:
            raise StateError("this sub-network does not carry its originating specs")
        for spec, (m0, k0), (m1, k1) in zip(self.specs, self.choice.pairs, choice.pairs):
            if m1 > m0 or (m1 > 0 and k1 > k0):
                raise GridError(
                    f"layer {spec.index}: ({m1},{k1}) does not shrink ({m0},{k0})"
                )
            spec.validate_choice(m1, k1)
        flow = channel_flow(self.specs, choice)
        by_index = {l.spec.index: l for l in self.layers}
        layers = []
        for i, (spec, (m, k)) in enumerate(zip(self.specs, choice.pairs)):
            z_in, z_out = flow[i], flow[i + 1]
            if m == 0 and z_out == z_in:
                continue
            if m > 0:
                src = by_index[spec.index]
                win = kernel_window(src.k, k) if k < src.k else slice(None)
                weight = T.Parameter(
                    src.weight.value[:m, :z_in, win, win].copy(), src.weight.name
                )
                bias = T.Parameter(src.bias.value[:m].copy(), src.bias.name)
            else:
                weight = bias = None
            layers.append(
                EvalLayer(spec=spec, m=m, k=k if m > 0 else 0, z_in=z_in, z_out=z_out,
                          weight=weight, bias=bias)
            )
        head_w = T.Parameter(self.head_w.value[:, : flow[-1]].copy(), "head.weight")
        head_b = T.Parameter(self.head_b.value.copy(), "head.bias")
        return SubNetwork(layers, head_w, head_b, choice=choice, specs=self.specs)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}


def subnetwork_from_architecture(
    rows: list[dict], rng: np.random.Generator, dtype=T.DEFAULT_DTYPE
) -> SubNetwork:
    """Fresh randomly initialized network matching an architecture JSON."""
    if not rows or rows[-1]["kind"] != "dense":
        raise GridError("architecture must end with the dense head row")
    head_row, conv_rows = rows[-1], rows[:-1]
    specs, pairs = [], []
    for row in conv_rows:
        k = int(row["k"]) if int(row["M"]) > 0 else 3
        k_max = max(k, 3)
        specs.append(
            LayerSpec(
                index=int(row["index"]),
                c=int(row["C"]),
                t=int(row["T"]),
                k_max=k_max,
                stride=int(row["stride"]),
                width_grid=tuple(sorted({0, int(row["M"]), int(row["T"])}))
                if row["stride"] == 1
                else tuple(sorted({max(1, int(row["M"])), int(row["T"])})),
                kernel_grid=tuple(range(3, k_max + 1, 2)),
            )
        )
        pairs.append((int(row["M"]), k))
    choice = SubNetChoice(tuple(pairs))
    flow = channel_flow(specs, choice)
    layers = []
    for i, (spec, (m, k)) in enumerate(zip(specs, pairs)):
        z_in, z_out = flow[i], flow[i + 1]
        if m == 0 and z_out == z_in:
            continue
        if m > 0:
            weight = T.Parameter(_he_conv(rng, m, z_in, k, dtype), f"layer{spec.index}.weight")
            bias = T.Parameter(np.zeros(m, dtype=dtype), f"layer{spec.index}.bias")
        else:
            weight = bias = None
        layers.append(
            EvalLayer(spec=spec, m=m, k=k if m > 0 else 0, z_in=z_in, z_out=z_out,
                      weight=weight, bias=bias)
        )
    classes = int(head_row["M"])
    feat = flow[-1]
    head_w = T.Parameter(
        (rng.standard_normal((classes, feat)) * np.sqrt(2.0 / feat)).astype(dtype), "head.weight"
    )
    head_b = T.Parameter(np.zeros(classes, dtype=dtype), "head.bias")
    return SubNetwork(layers, head_w, head_b, choice=choice, specs=tuple(specs))


def save_architecture(path: str | Path, rows: list[dict]) -> None:
    Path(path).write_text(json.dumps(rows, indent=1))


def load_architecture(path: str | Path) -> list[dict]:
    rows = json.loads(Path(path).read_text())
    if not isinstance(rows, list):
        raise GridError("architecture JSON must be an ordered list of layer rows")
    return rows
