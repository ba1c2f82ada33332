"""The grid network (LOOT) and the recurrent seed classifier, plus checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, GRUParams, Tensor
from .encoding import n_output_channels

CHECKPOINT_MAGIC = b"TRKNET01"
CHECKPOINT_VERSION = 1
AXIS_FLOOR = 1e-6


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


class _Dense:
    def __init__(self, rng, n_in, n_out):
        self.w = Tensor(ad.glorot_uniform(rng, n_in, n_out), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return ad.conv1x1(x, self.w, self.b)


class Network:
    kind = ""

    def __init__(self, **hyper):
        self.hyper = hyper

    def _modules(self) -> "OrderedDict[str, object]":
        raise NotImplementedError

    def named_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every parameter and batch-norm statistic, in a fixed order."""
        out = OrderedDict()
        for name, mod in self._modules().items():
            if isinstance(mod, _Dense):
                out[f"{name}.w"] = mod.w.data
                out[f"{name}.b"] = mod.b.data
            elif isinstance(mod, BatchNormState):
                out[f"{name}.gamma"] = mod.gamma.data
                out[f"{name}.beta"] = mod.beta.data
                out[f"{name}.running_mean"] = mod.running_mean
                out[f"{name}.running_var"] = mod.running_var
            elif isinstance(mod, GRUParams):
                out[f"{name}.w"] = mod.w.data
                out[f"{name}.u"] = mod.u.data
                out[f"{name}.b"] = mod.b.data
        return out

    def load_arrays(self, arrays: dict) -> None:
        own = self.named_arrays()
        if list(own) != list(arrays):
            raise CheckpointError("parameter names do not match the architecture")
        for name, mod in self._modules().items():
            if isinstance(mod, _Dense):
                mod.w.data, mod.b.data = _fit(arrays, name, own, "w", "b")
            elif isinstance(mod, BatchNormState):
                (mod.gamma.data, mod.beta.data, mod.running_mean,
                 mod.running_var) = _fit(arrays, name, own, "gamma", "beta", "running_mean", "running_var")
            elif isinstance(mod, GRUParams):
                mod.w.data, mod.u.data, mod.b.data = _fit(arrays, name, own, "w", "u", "b")

    def parameters(self) -> list[Tensor]:
        params = []
        for mod in self._modules().values():
            if isinstance(mod, _Dense):
                params += [mod.w, mod.b]
            elif isinstance(mod, BatchNormState):
                params += [mod.gamma, mod.beta]
            elif isinstance(mod, GRUParams):
                params += mod.parameters()
        return params

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _fit(arrays, prefix, own, *keys):
    out = []
    for k in keys:
        name = f"{prefix}.{k}"
        a = np.array(arrays[name], dtype=np.float64)
        if a.shape != own[name].shape:
            raise CheckpointError(f"{name}: shape {a.shape} != {own[name].shape}")
        out.append(a)
    return out


class LootNet(Network):
    """CoordConv, four 1x1 conv + ReLU + batch-norm stages, two heads.

    Input (batch, h, w, d) occupancy; output (batch, h, w, 2(d-1)+1) with
    the sigmoid confidence in channel 0 followed by linear shift channels.
    """

    kind = "loot"

    def __init__(self, n_stations: int = 5, width: int = 64, height: int = 64, seed: int = 0,
                 coord_filters: int = 16, filters: tuple = (32, 32, 64, 64)):
        if n_stations < 2:
            raise ValueError("the grid network needs at least two stations")
        filters = tuple(int(f) for f in filters)
        super().__init__(n_stations=n_stations, width=width, height=height, seed=seed,
                         coord_filters=coord_filters, filters=list(filters))
        self.n_stations, self.width, self.height = n_stations, width, height
        rng = np.random.default_rng(seed)
        self.coord = _Dense(rng, n_stations + 2, coord_filters)
        self.convs = []
        self.norms = []
        n_in = coord_filters
        for f in filters:
            self.convs.append(_Dense(rng, n_in, f))
            self.norms.append(BatchNormState.create(f))
            n_in = f
        self.conf_head = _Dense(rng, n_in, 1)
        self.shift_head = _Dense(rng, n_in, 2 * (n_stations - 1))

    def _modules(self):
        mods = OrderedDict(coord=self.coord)
        for i, (c, n) in enumerate(zip(self.convs, self.norms), start=1):
            mods[f"conv{i}"] = c
            mods[f"bn{i}"] = n
        mods["conf"] = self.conf_head
        mods["shift"] = self.shift_head
        return mods

    @property
    def output_channels(self) -> int:
        return n_output_channels(self.n_stations)

    def forward(self, grids, training: bool = False) -> Tensor:
        x = ad.as_tensor(grids)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.shape[1:] != (self.height, self.width, self.n_stations):
            raise ad.ShapeError(f"grid shape {x.shape[1:]} does not match the model")
        x = ad.relu(self.coord(ad.coordconv_augment(x)))
        for conv, norm in zip(self.convs, self.norms):
            x = ad.batchnorm(ad.relu(conv(x)), norm, training)
        return ad.concat([ad.sigmoid(self.conf_head(x)), self.shift_head(x)], axis=-1)

    __call__ = forward


class SeqTrackerNet(Network):
    """Per-point dense lift, two stacked GRUs, classification and ellipse heads.

    Points are (x, y, z) scaled to [-1, 1]: x and y by the half-widths of
    the station planes, z over [0, z_max].  Ellipse outputs live in the
    same scaled (x, y) units.
    """

    kind = "seq"

    def __init__(self, n_stations: int = 5, half_x: float = 32.0, half_y: float = 32.0,
                 z_max: float = 106.0, feature_dim: int = 3, conv_filters: int = 32,
                 gru_units: tuple = (32, 16), seed: int = 0):
        if feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        gru_units = tuple(int(u) for u in gru_units)
        super().__init__(n_stations=n_stations, half_x=half_x, half_y=half_y, z_max=z_max,
                         feature_dim=feature_dim, conv_filters=conv_filters,
                         gru_units=list(gru_units), seed=seed)
        self.n_stations = n_stations
        self.scale = np.array([half_x, half_y, z_max / 2.0])[:feature_dim]
        self.offset = np.array([0.0, 0.0, 1.0])[:feature_dim]
        rng = np.random.default_rng(seed)
        self.lift = _Dense(rng, feature_dim, conv_filters)
        self.grus = []
        n_in = conv_filters
        for units in gru_units:
            self.grus.append(GRUParams(
                w=Tensor(ad.glorot_uniform(rng, n_in, units, (n_in, 3 * units)), requires_grad=True),
                u=Tensor(ad.glorot_uniform(rng, units, units, (units, 3 * units)), requires_grad=True),
                b=Tensor(np.zeros(3 * units), requires_grad=True),
            ))
            n_in = units
        self.cls_head = _Dense(rng, n_in, 1)
        self.reg_head = _Dense(rng, n_in, 4)

    def _modules(self):
        mods = OrderedDict(lift=self.lift)
        for i, g in enumerate(self.grus, start=1):
            mods[f"gru{i}"] = g
        mods["cls"] = self.cls_head
        mods["reg"] = self.reg_head
        return mods

    def scale_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)[..., : len(self.scale)]
        return points / self.scale - self.offset

    def scale_xy(self, xy: np.ndarray) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) / self.scale[:2]

    def unscale_xy(self, xy: np.ndarray) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) * self.scale[:2]

    def forward(self, points) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
        """Run a (batch, length, 3) block of raw points of one common length.

        Returns (probability, center, semiaxes); the probability is None for
        length 2 and the ellipse is None for full-length candidates.
        """
        raw = np.asarray(points, dtype=np.float64)
        if raw.ndim != 3:
            raise ad.ShapeError("expected a (batch, length, features) block of equal-length sequences")
        length = raw.shape[1]
        if not 2 <= length <= self.n_stations + 1:
            raise ad.ShapeError(f"sequence length {length} outside 2..{self.n_stations + 1}")
        x = ad.relu(self.lift(Tensor(self.scale_points(raw))))
        for gru in self.grus:
            states = ad.gru_sequence(x, gru)
            x = ad.stack(states, axis=1)
        last = states[-1]
        prob = center = axes = None
        if length >= 3:
            prob = ad.sigmoid(self.cls_head(last)).reshape(-1)
        if length <= self.n_stations:
            reg = self.reg_head(last)
            center = reg[:, :2]
            axes = ad.maximum(ad.softplus(reg[:, 2:]), AXIS_FLOOR)
        return prob, center, axes

    __call__ = forward


MODEL_KINDS = {LootNet.kind: LootNet, SeqTrackerNet.kind: SeqTrackerNet}


# -- checkpoint file ------------------------------------------------------------
def _checksum(payload: bytes) -> int:
    return struct.unpack("<Q", hashlib.blake2b(payload, digest_size=8).digest())[0]


def checkpoint_bytes(model: Network) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    kind = model.kind.encode()
    hyper = json.dumps(model.hyper, sort_keys=True).encode()
    parts += [struct.pack("<I", len(kind)), kind, struct.pack("<I", len(hyper)), hyper]
    arrays = model.named_arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        enc = name.encode()
        parts += [struct.pack("<I", len(enc)), enc, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


def save_checkpoint(model: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_kind: str | None = None) -> Network:
    buf = Path(path).read_bytes()
    if len(buf) < len(CHECKPOINT_MAGIC) + 12 or buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if _checksum(body) != stored:
        raise CheckpointError("checksum mismatch")
    r = _Reader(body)
    r.take(8)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = r.take(r.unpack("<I")[0]).decode()
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"checkpoint holds a {kind!r} model, expected {expected_kind!r}")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    hyper = json.loads(r.take(r.unpack("<I")[0]).decode())
    arrays = OrderedDict()
    for _ in range(r.unpack("<I")[0]):
        name = r.take(r.unpack("<I")[0]).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameter records")
    model = MODEL_KINDS[kind](**hyper)
    model.load_arrays(arrays)
    return model


def build_loot(n_stations: int, width: int, height: int, seed: int = 0, **kw) -> LootNet:
    return LootNet(n_stations=n_stations, width=width, height=height, seed=seed, **kw)


def build_seq_tracker(feature_dim: int = 3, conv_filters: int = 32, gru_units=(32, 16), seed: int = 0,
                      **kw) -> SeqTrackerNet:
    return SeqTrackerNet(feature_dim=feature_dim, conv_filters=conv_filters, gru_units=gru_units,
                         seed=seed, **kw)
