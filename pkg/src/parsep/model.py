"""Hyperparameter points, their resolution into layer plans, parameter counts
and the parallel encoder-decoder CNN / LSTM embedding network."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import nncore as nn
from .dsp import N_BINS
from .errors import InvalidConfig, RangeError

EMB_DIM = 20
N_SPEAKERS = 2

# name -> (kind, range); kinds: int, real, cat
HP_RANGES: dict[str, tuple[str, tuple]] = {
    "num_enc_layers": ("int", (0, 6)),
    "first_enc_channels": ("int", (1, 2000)),
    "channel_factor": ("real", (0.5, 3.0)),
    "last_dec_channels": ("int", (1, 200)),
    "kernel_t": ("int", (1, 15)),
    "kernel_t_decay": ("real", (0.83, 3.33)),
    "kernel_f": ("int", (1, 15)),
    "kernel_f_decay": ("real", (0.83, 3.33)),
    "pool_period_t": ("int", (1, 7)),
    "pool_period_f": ("int", (1, 7)),
    "upsampling": ("cat", ("bypass", "unpooling", "none")),
    "lstm_layers": ("int", (0, 6)),
    "lstm_first_cells": ("int", (1, 2000)),
    "lstm_cell_factor": ("real", (0.5, 3.0)),
    "lstm_direction": ("cat", ("uni", "bi")),
    "concat": ("cat", ("broadcast", "flattening")),
    "fc_layers": ("int", (0, 3)),
    "fc_first_units": ("int", (1, 1024)),
    "fc_unit_factor": ("real", (0.3, 2.0)),
}

_CNN_FIELDS = ("first_enc_channels", "channel_factor", "last_dec_channels", "kernel_t", "kernel_t_decay",
               "kernel_f", "kernel_f_decay", "pool_period_t", "pool_period_f", "upsampling")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def geometric(first: int, factor: float | None, n: int) -> list[int]:
    """``round(first * factor**(l-1))`` for l = 1..n, floored at 1."""
    f = 1.0 if factor is None else factor
    return [max(1, round_half_up(first * f ** l)) for l in range(n)]


def active_fields(values: dict) -> set[str]:
    """Which hyperparameters influence the network, given the layer counts."""
    active = {"num_enc_layers", "lstm_layers", "fc_layers"}
    L = values.get("num_enc_layers") or 0
    if L >= 1:
        active.update(_CNN_FIELDS)
        if L == 1:
            active -= {"channel_factor", "kernel_t_decay", "kernel_f_decay"}
        pt, pf = values.get("pool_period_t"), values.get("pool_period_f")
        if not ((pt is not None and pt <= L) or (pf is not None and pf <= L)):
            active.discard("upsampling")
    K = values.get("lstm_layers") or 0
    if K >= 1:
        active.update({"lstm_first_cells", "lstm_direction"})
        if K > 1:
            active.add("lstm_cell_factor")
    if L >= 1 and K >= 1:
        active.add("concat")
    M = values.get("fc_layers") or 0
    if M >= 1:
        active.add("fc_first_units")
        if M > 1:
            active.add("fc_unit_factor")
    return active


@dataclass(frozen=True)
class HyperParams:
    num_enc_layers: int = 0
    first_enc_channels: int | None = None
    channel_factor: float | None = None
    last_dec_channels: int | None = None
    kernel_t: int | None = None
    kernel_t_decay: float | None = None
    kernel_f: int | None = None
    kernel_f_decay: float | None = None
    pool_period_t: int | None = None
    pool_period_f: int | None = None
    upsampling: str | None = None
    lstm_layers: int = 0
    lstm_first_cells: int | None = None
    lstm_cell_factor: float | None = None
    lstm_direction: str | None = None
    concat: str | None = None
    fc_layers: int = 0
    fc_first_units: int | None = None
    fc_unit_factor: float | None = None

    def active(self) -> set[str]:
        return active_fields(asdict(self))

    def canonical(self) -> "HyperParams":
        """Copy with every inactive field set to None."""
        act = self.active()
        return replace(self, **{f.name: None for f in fields(self) if f.name not in act})

    def validate(self) -> None:
        if self.num_enc_layers == 0 and self.lstm_layers == 0:
            raise InvalidConfig("a model needs at least one CNN encoder layer or one LSTM layer")
        for name in self.active():
            value = getattr(self, name)
            kind, rng = HP_RANGES[name]
            if value is None:
                raise InvalidConfig(f"{name} is required by this configuration")
            if kind == "cat":
                if value not in rng:
                    raise RangeError(f"{name}={value!r} not in {rng}")
            elif not (rng[0] <= value <= rng[1]):
                raise RangeError(f"{name}={value} outside [{rng[0]}, {rng[1]}]")
            elif kind == "int" and int(value) != value:
                raise RangeError(f"{name}={value} must be an integer")

    def to_dict(self) -> dict:
        return asdict(self.canonical())

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        unknown = set(d) - set(HP_RANGES)
        if unknown:
            raise InvalidConfig(f"unknown hyperparameters: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if v is not None and HP_RANGES[k][0] == "int":
                v = int(v)
            elif v is not None and HP_RANGES[k][0] == "real":
                v = float(v)
            kw[k] = v
        return cls(**kw)


@dataclass(frozen=True)
class ModelSpec:
    n_bins: int
    emb_dim: int
    n_speakers: int
    enc_channels: tuple[int, ...]
    kernels: tuple[tuple[int, int], ...]
    pools: tuple[tuple[int, int], ...]  # pool extent (1 or 2) on (T, F) after each encoder layer
    dec_channels: tuple[int, ...]  # decoder outputs, in application order (mirror of layer L .. 1)
    upsampling: str | None
    lstm_widths: tuple[int, ...]
    bidirectional: bool
    concat: str  # broadcast | flattening, resolved even when a branch is absent
    fc_widths: tuple[int, ...]

    @property
    def has_cnn(self) -> bool:
        return len(self.enc_channels) > 0

    @property
    def has_lstm(self) -> bool:
        return len(self.lstm_widths) > 0

    @property
    def cnn_out(self) -> int:
        return self.dec_channels[-1] if self.has_cnn else 0

    @property
    def lstm_out(self) -> int:
        if not self.has_lstm:
            return 0
        return self.lstm_widths[-1] * (2 if self.bidirectional else 1)


@dataclass(frozen=True)
class ParamPartition:
    cnn_params: int
    lstm_params: int
    fc_params: int

    @property
    def total(self) -> int:
        return self.cnn_params + self.lstm_params + self.fc_params

    def to_dict(self) -> dict:
        return {"cnn_params": self.cnn_params, "lstm_params": self.lstm_params,
                "fc_params": self.fc_params, "total": self.total}


def resolve(hp: HyperParams, n_bins: int = N_BINS, emb_dim: int = EMB_DIM,
            n_speakers: int = N_SPEAKERS) -> ModelSpec:
    hp.validate()
    L = hp.num_enc_layers
    enc, kernels, pools, dec = [], [], [], []
    if L > 0:
        enc = geometric(hp.first_enc_channels, hp.channel_factor, L)
        t_pools = f_pools = 0
        for l in range(1, L + 1):
            t_decay = hp.kernel_t_decay if t_pools else 1.0
            f_decay = hp.kernel_f_decay if f_pools else 1.0
            kernels.append((max(1, round_half_up(hp.kernel_t / t_decay ** t_pools)),
                            max(1, round_half_up(hp.kernel_f / f_decay ** f_pools))))
            pt = 2 if l % hp.pool_period_t == 0 else 1
            pf = 2 if l % hp.pool_period_f == 0 else 1
            pools.append((pt, pf))
            t_pools += pt == 2
            f_pools += pf == 2
        dec = [enc[l - 2] for l in range(L, 1, -1)] + [hp.last_dec_channels]
    K = hp.lstm_layers
    lstm = geometric(hp.lstm_first_cells, hp.lstm_cell_factor, K) if K else []
    if L and K:
        concat = hp.concat
    else:
        concat = "broadcast" if L else "flattening"
    fc = geometric(hp.fc_first_units, hp.fc_unit_factor, hp.fc_layers) if hp.fc_layers else []
    upsampling = hp.canonical().upsampling
    return ModelSpec(n_bins, emb_dim, n_speakers, tuple(enc), tuple(kernels), tuple(pools), tuple(dec),
                     upsampling, tuple(lstm), hp.lstm_direction == "bi", concat, tuple(fc))


def _dec_inputs(spec: ModelSpec) -> list[int]:
    """Input channels of each decoder layer (application order)."""
    L = len(spec.enc_channels)
    ins = []
    for k, l in enumerate(range(L, 0, -1)):
        c = spec.enc_channels[L - 1] if k == 0 else spec.dec_channels[k - 1]
        if spec.upsampling == "bypass" and spec.pools[l - 1] != (1, 1):
            c += spec.enc_channels[l - 1]
        ins.append(c)
    return ins


def _head_dims(spec: ModelSpec) -> tuple[int, int]:
    """(input width, output width) of the fully connected head."""
    if spec.concat == "broadcast":
        return spec.cnn_out + spec.lstm_out, spec.emb_dim
    return spec.n_bins * spec.cnn_out + spec.lstm_out, spec.n_bins * spec.emb_dim


def count_params(spec: ModelSpec) -> ParamPartition:
    cnn = 0
    cin = 1
    for (wt, wf), cout in zip(spec.kernels, spec.enc_channels):
        cnn += (wt * wf * cin + 1) * cout
        cin = cout
    L = len(spec.enc_channels)
    for k, c_in in enumerate(_dec_inputs(spec)):
        wt, wf = spec.kernels[L - 1 - k]
        cnn += (wt * wf * c_in + 1) * spec.dec_channels[k]
    lstm = 0
    din = spec.n_bins
    dirs = 2 if spec.bidirectional else 1
    for n in spec.lstm_widths:
        lstm += dirs * 4 * ((din + n) * n + n)
        din = n * dirs
    fc = 0
    width, out = _head_dims(spec)
    for units in spec.fc_widths:
        fc += (width + 1) * units
        width = units
    fc += (width + 1) * out
    return ParamPartition(cnn, lstm, fc)


class Network(nn.Graph):
    """Parallel encoder-decoder CNN and (bi)LSTM producing unit-norm embeddings.

    ``forward`` takes features of shape (T, F) or (B, T, F) and returns a
    tensor of shape (..., T, F, D).
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, fuse_head: bool = True):
        super().__init__()
        self.spec = spec
        self.fuse_head = fuse_head
        rng = np.random.default_rng(seed)
        cin = 1
        for l, ((wt, wf), cout) in enumerate(zip(spec.kernels, spec.enc_channels), 1):
            self.add_param(f"cnn/enc{l}/kernel", nn.init_dense(rng, wt * wf * cin, (wt, wf, cin, cout)))
            self.add_param(f"cnn/enc{l}/bias", np.zeros(cout))
            cin = cout
        L = len(spec.enc_channels)
        for k, c_in in enumerate(_dec_inputs(spec)):
            l = L - k
            wt, wf = spec.kernels[l - 1]
            cout = spec.dec_channels[k]
            self.add_param(f"cnn/dec{l}/kernel", nn.init_dense(rng, wt * wf * c_in, (wt, wf, c_in, cout)))
            self.add_param(f"cnn/dec{l}/bias", np.zeros(cout))
        din = spec.n_bins
        dirs = ("fw", "bw") if spec.bidirectional else ("fw",)
        for k, n in enumerate(spec.lstm_widths, 1):
            for d in dirs:
                wx, wh, b = nn.init_lstm(rng, din, n)
                self.add_param(f"lstm/l{k}/{d}/wx", wx)
                self.add_param(f"lstm/l{k}/{d}/wh", wh)
                self.add_param(f"lstm/l{k}/{d}/b", b)
            din = n * len(dirs)
        width, out = _head_dims(spec)
        for k, units in enumerate(spec.fc_widths, 1):
            self.add_param(f"fc/l{k}/w", nn.init_dense(rng, width, (width, units)))
            self.add_param(f"fc/l{k}/b", np.zeros(units))
            width = units
        self.add_param("fc/out/w", nn.init_dense(rng, width, (width, out)))
        # a nonzero output bias keeps bins with an all-zero input off the normalization guard
        self.add_param("fc/out/b", nn.init_dense(rng, width, (out,)))

    def partition(self) -> ParamPartition:
        sizes = {"cnn": 0, "lstm": 0, "fc": 0}
        for name, p in self.params.items():
            sizes[name.split("/")[0]] += p.data.size
        return ParamPartition(sizes["cnn"], sizes["lstm"], sizes["fc"])

    def _cnn(self, x: nn.Tensor) -> nn.Tensor:
        spec, P = self.spec, self.params
        h = nn.reshape(x, x.shape + (1,))
        acts, indices = [], []
        for l in range(1, len(spec.enc_channels) + 1):
            a = nn.relu(nn.conv2d(h, P[f"cnn/enc{l}/kernel"], P[f"cnn/enc{l}/bias"]))
            acts.append(a)
            pt, pf = spec.pools[l - 1]
            if (pt, pf) != (1, 1):
                h, idx = nn.maxpool(a, pt, pf)
                indices.append(idx)
            else:
                h = a
                indices.append(None)
        for l in range(len(spec.enc_channels), 0, -1):
            idx = indices[l - 1]
            if idx is not None:
                a = acts[l - 1]
                if spec.upsampling == "unpooling":
                    h = nn.unpool(h, idx)
                else:
                    h = nn.upsample_nearest(h, *idx.window, a.shape[-3:-1])
                if spec.upsampling == "bypass":
                    h = nn.concat([h, a], axis=-1)
            h = nn.relu(nn.conv2d(h, P[f"cnn/dec{l}/kernel"], P[f"cnn/dec{l}/bias"]))
        return h

    def _lstm(self, x: nn.Tensor) -> nn.Tensor:
        P = self.params
        h = x
        for k in range(1, len(self.spec.lstm_widths) + 1):
            fw = tuple(P[f"lstm/l{k}/fw/{w}"] for w in ("wx", "wh", "b"))
            bw = tuple(P[f"lstm/l{k}/bw/{w}"] for w in ("wx", "wh", "b")) if self.spec.bidirectional else None
            h = nn.lstm_layer(h, fw, bw)
        return h

    def _head(self, cnn: nn.Tensor | None, lstm: nn.Tensor | None) -> nn.Tensor:
        spec, P = self.spec, self.params
        layers = [(P[f"fc/l{k}/w"], P[f"fc/l{k}/b"]) for k in range(1, len(spec.fc_widths) + 1)]
        layers.append((P["fc/out/w"], P["fc/out/b"]))
        start = 0
        if cnn is not None and lstm is not None:
            if spec.concat == "broadcast" and self.fuse_head:
                h = nn.concat_broadcast_linear(cnn, lstm, *layers[0])
                start = 1
            elif spec.concat == "broadcast":
                h = nn.concat_broadcast(cnn, lstm)
            else:
                h = nn.concat_flatten(cnn, lstm)
        elif cnn is not None:
            h = cnn
        else:
            h = lstm
        for k in range(start, len(layers)):
            if k > 0:
                h = nn.relu(h)
            h = nn.linear(h, *layers[k])
        if spec.concat == "flattening":
            h = nn.reshape(h, h.shape[:-1] + (spec.n_bins, spec.emb_dim))
        return h

    def forward(self, features: np.ndarray) -> nn.Tensor:
        x = nn.as_tensor(features)
        cnn = self._cnn(x) if self.spec.has_cnn else None
        lstm = self._lstm(x) if self.spec.has_lstm else None
        return nn.unit_normalize(self._head(cnn, lstm))

    def embed(self, features: np.ndarray) -> np.ndarray:
        return self.forward(features).data


def build(spec: ModelSpec, seed: int = 0) -> Network:
    return Network(spec, seed)
