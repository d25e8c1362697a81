"""Dual-CyCon Net: shared time/frequency branches, dual-domain attention,
per-domain heads, cycle-consistency and classification losses.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import engine as E
from .engine import Param, Tensor
from .errors import InputTooSmall, PeakAxisMismatch, ShapeMismatch
from .signal_io import MeasurementFeatures

ATTENTION_AXES = ("peak", "none", "channel", "feature")
DOMAINS = ("dual", "td", "fd")
BLOCK_ORDERS = ("conv_relu_bn", "conv_bn_relu")
HEADS = ("jp", "jn", "tp", "tn", "fp", "fn")


@dataclass
class ModelConfig:
    n_peaks: int = 257
    w_t: int = 128
    f_bins: int = 257
    channels: Tuple[int, ...] = (8, 16, 32)
    kernel: int = 7
    stride: int = 2
    joint_channels: int = 64
    se_ratio: float = 0.25
    attention: str = "peak"
    domains: str = "dual"
    block_order: str = "conv_relu_bn"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.attention not in ATTENTION_AXES:
            raise ValueError(f"attention must be one of {ATTENTION_AXES}")
        if self.domains not in DOMAINS:
            raise ValueError(f"domains must be one of {DOMAINS}")
        if self.block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {BLOCK_ORDERS}")

    @classmethod
    def reduced(cls, n_peaks=16, w_t=32, w_f=64, **kw):
        """Small geometry for tests: 3x3 kernels at stride 1 fit 16 peaks."""
        base = dict(n_peaks=n_peaks, w_t=w_t, f_bins=w_f // 2 + 1, channels=(4, 6, 8),
                    kernel=3, stride=1, joint_channels=8)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @property
    def uses_td(self):
        return self.domains in ("dual", "td")

    @property
    def uses_fd(self):
        return self.domains in ("dual", "fd")

    @property
    def heads(self):
        if self.domains == "td":
            return ("tp", "tn")
        if self.domains == "fd":
            return ("fp", "fn")
        return HEADS


def _conv_out(n, cfg):
    return E.conv_output_size(n, cfg.kernel, cfg.stride)


def branch_shapes(height, cfg: ModelConfig, label="branch"):
    """(C, Z, N) after each block for a 1 x height x n_peaks input."""
    h, w = height, cfg.n_peaks
    shapes = []
    for i, c in enumerate(cfg.channels, start=1):
        if h < cfg.kernel or w < cfg.kernel:
            raise InputTooSmall(
                f"{label} block-{i} input {h}x{w} is smaller than the "
                f"{cfg.kernel}x{cfg.kernel} kernel")
        h, w = _conv_out(h, cfg), _conv_out(w, cfg)
        shapes.append((c, h, w))
    return shapes


def model_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Static shape contract for every stage, raising on impossible geometry."""
    shapes = {}
    if cfg.uses_td:
        shapes["td_blocks"] = branch_shapes(cfg.w_t, cfg, "time-domain")
        shapes["td"] = shapes["td_blocks"][-1]
    if cfg.uses_fd:
        shapes["fd_blocks"] = branch_shapes(cfg.f_bins, cfg, "frequency-domain")
        shapes["fd"] = shapes["fd_blocks"][-1]
    if cfg.domains == "dual":
        c, zt, n = shapes["td"]
        _, zf, nf = shapes["fd"]
        if n != nf:
            raise PeakAxisMismatch(f"peak axes differ: {n} vs {nf}")
        shapes["concat"] = (c, zt + zf, n)
        if zt + zf < cfg.kernel or n < cfg.kernel:
            raise InputTooSmall(f"joint conv input {zt + zf}x{n} smaller than kernel")
        shapes["joint"] = (cfg.joint_channels, _conv_out(zt + zf, cfg), _conv_out(n, cfg))
        size = {"peak": n, "channel": c, "feature": zt + zf, "none": 0}[cfg.attention]
        if size:
            shapes["se"] = (2 * size if cfg.attention != "feature" else size,
                            max(1, int(size * cfg.se_ratio)), size)
    return shapes


@dataclass
class Batch:
    """Stacked network inputs: each array is (B, 1, H, n_peaks)."""

    td_pos: np.ndarray
    td_neg: np.ndarray
    fd_pos: np.ndarray
    fd_neg: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def swapped(self):
        return Batch(self.td_neg, self.td_pos, self.fd_neg, self.fd_pos, self.labels)


def make_batch(features: Sequence[MeasurementFeatures]) -> Batch:
    """Stack features, transposing each N_p x H matrix to 1 x H x N_p."""
    def stack(attr):
        return np.stack([getattr(f, attr).T[None] for f in features]).astype(np.float64)

    return Batch(stack("td_pos"), stack("td_neg"), stack("fd_pos"), stack("fd_neg"),
                 np.array([f.label for f in features], dtype=np.float64))


@dataclass
class ForwardOutputs:
    logits: Dict[str, Tensor]
    maps: Dict[str, Tensor]
    vectors: Dict[str, np.ndarray] = field(default_factory=dict)
    attention: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def probs(self) -> Dict[str, np.ndarray]:
        return {k: E.ops._sigmoid(v.data) for k, v in self.logits.items()}

    def prob(self, key):
        return self.probs[key]


@dataclass
class LossBreakdown:
    total: Tensor
    l_cls: float
    l_ct: float
    l_cf: float
    lam: float

    @property
    def l_c(self):
        return self.l_ct + self.l_cf

    @property
    def l_total(self):
        return float(self.total.data)


class DualCyConNet:
    """Parameters and forward pass of the network.

    ``domains="td"``/``"fd"`` keeps a single branch and its head (no DDAM);
    ``attention`` picks the squeeze-excitation axis inside the DDAM.
    """

    def __init__(self, cfg: ModelConfig = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.shapes = model_shapes(self.cfg)
        self.seed = seed
        self.params: "OrderedDict[str, Param]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        rng = np.random.default_rng(seed)
        c = self.cfg
        for dom, on in (("td", c.uses_td), ("fd", c.uses_fd)):
            if not on:
                continue
            c_in = 1
            for i, c_out in enumerate(c.channels, start=1):
                self._conv(rng, f"{dom}.conv{i}", c_out, c_in, c.kernel)
                self._bn(f"{dom}.bn{i}", c_out)
                c_in = c_out
            self._fc(rng, f"head_{dom}", 1, c.channels[-1])
        if c.domains == "dual":
            if "se" in self.shapes:
                fan_in, hidden, out = self.shapes["se"]
                self._fc(rng, "ddam.fc1", hidden, fan_in)
                self._fc(rng, "ddam.fc2", out, hidden)
            self._conv(rng, "ddam.joint_conv", c.joint_channels, c.channels[-1], c.kernel)
            self._fc(rng, "ddam.joint_fc", 1, c.joint_channels)

    # -- construction -------------------------------------------------------
    def _add(self, name, data):
        self.params[name] = Param(Tensor(data, requires_grad=True, name=name), name)

    def _conv(self, rng, name, c_out, c_in, k):
        bound = np.sqrt(6.0 / (c_in * k * k))
        self._add(name + ".weight", rng.uniform(-bound, bound, (c_out, c_in, k, k)))
        self._add(name + ".bias", np.zeros(c_out))

    def _fc(self, rng, name, n_out, n_in):
        bound = np.sqrt(6.0 / n_in)
        self._add(name + ".weight", rng.uniform(-bound, bound, (n_out, n_in)))
        self._add(name + ".bias", np.zeros(n_out))

    def _bn(self, name, c):
        self._add(name + ".gamma", np.ones(c))
        self._add(name + ".beta", np.zeros(c))
        self.buffers[name + ".running_mean"] = np.zeros(c)
        self.buffers[name + ".running_var"] = np.ones(c)

    def t(self, name) -> Tensor:
        return self.params[name].tensor

    def param_list(self) -> List[Param]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.tensor.zero_grad()

    # -- state --------------------------------------------------------------
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict((k, p.data.copy()) for k, p in self.params.items())
        state.update((k, v.copy()) for k, v in self.buffers.items())
        return state

    def load_state_dict(self, state):
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ShapeMismatch(f"{k}: stored {state[k].shape}, model {p.data.shape}")
            p.tensor.data[...] = state[k]
        for k, v in self.buffers.items():
            v[...] = state[k]

    def optimizer_state(self):
        return {k: (p.step, p.m.copy(), p.v.copy()) for k, p in self.params.items()}

    def load_optimizer_state(self, state):
        for k, (step, m, v) in state.items():
            p = self.params[k]
            p.step, p.m[...], p.v[...] = step, m, v

    # -- forward ------------------------------------------------------------
    def branch_forward(self, x, dom, training=False) -> Tensor:
        """Three conv blocks of one domain; ``x`` is (B, 1, H, n_peaks)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = E.reshape(x, (1,) + x.shape)
        for i in range(1, len(self.cfg.channels) + 1):
            x = E.conv2d(x, self.t(f"{dom}.conv{i}.weight"), self.t(f"{dom}.conv{i}.bias"),
                         stride=self.cfg.stride)
            if self.cfg.block_order == "conv_relu_bn":
                x = self._bn_apply(E.relu(x), f"{dom}.bn{i}", training)
            else:
                x = E.relu(self._bn_apply(x, f"{dom}.bn{i}", training))
        return x

    def _bn_apply(self, x, name, training):
        return E.batchnorm2d(x, self.t(name + ".gamma"), self.t(name + ".beta"),
                             self.buffers[name + ".running_mean"],
                             self.buffers[name + ".running_var"], training)

    def _excite(self, z):
        h = E.relu(E.fully_connected(z, self.t("ddam.fc1.weight"), self.t("ddam.fc1.bias")))
        return E.sigmoid(E.fully_connected(h, self.t("ddam.fc2.weight"), self.t("ddam.fc2.bias")))

    def ddam_forward(self, x_t: Tensor, x_f: Tensor):
        """Dual-domain attention on (B, C, Z, N) maps; returns ``(logit, u, d_j)``."""
        if x_t.ndim != 4 or x_f.ndim != 4:
            raise ShapeMismatch("DDAM expects (B, C, Z, N) feature maps")
        if x_t.shape[3] != x_f.shape[3]:
            raise PeakAxisMismatch(f"peak axes differ: {x_t.shape[3]} vs {x_f.shape[3]}")
        axis = self.cfg.attention
        u = None
        if axis == "peak":
            z = E.concat([E.global_avg_pool(x_t, (1, 2)), E.global_avg_pool(x_f, (1, 2))], axis=1)
            u = self._excite(z)
            x_m = E.concat([E.scale_along_axis(x_t, u, 3), E.scale_along_axis(x_f, u, 3)], axis=2)
        elif axis == "channel":
            z = E.concat([E.global_avg_pool(x_t, (2, 3)), E.global_avg_pool(x_f, (2, 3))], axis=1)
            u = self._excite(z)
            x_m = E.concat([E.scale_along_axis(x_t, u, 1), E.scale_along_axis(x_f, u, 1)], axis=2)
        elif axis == "feature":
            x_m = E.concat([x_t, x_f], axis=2)
            u = self._excite(E.global_avg_pool(x_m, (1, 3)))
            x_m = E.scale_along_axis(x_m, u, 2)
        else:
            x_m = E.concat([x_t, x_f], axis=2)
        joint = E.conv2d(x_m, self.t("ddam.joint_conv.weight"), self.t("ddam.joint_conv.bias"),
                         stride=self.cfg.stride)
        d_j = E.global_avg_pool(joint, (2, 3))
        logit = E.fully_connected(d_j, self.t("ddam.joint_fc.weight"), self.t("ddam.joint_fc.bias"))
        return E.reshape(logit, (logit.shape[0],)), u, d_j

    def _head(self, x, dom):
        d = E.global_avg_pool(x, (2, 3))
        logit = E.fully_connected(d, self.t(f"head_{dom}.weight"), self.t(f"head_{dom}.bias"))
        return E.reshape(logit, (logit.shape[0],)), d

    def forward(self, batch: Batch, training=False) -> ForwardOutputs:
        """Run both half-cycles through the shared branches and heads.

        Positive and negative inputs pass through a branch as one stacked
        batch of 2B, so batch-norm statistics cover both half-cycles.
        """
        B = len(batch)
        logits, maps, vectors, attention = {}, {}, {}, {}
        for dom, pos, neg, on in (("t", batch.td_pos, batch.td_neg, self.cfg.uses_td),
                                  ("f", batch.fd_pos, batch.fd_neg, self.cfg.uses_fd)):
            if not on:
                continue
            x = Tensor(np.concatenate([pos, neg], axis=0))
            out = self.branch_forward(x, dom + "d", training)
            expected = self.shapes[dom + "d"]
            if out.shape[1:] != expected:
                raise ShapeMismatch(f"{dom}d branch produced {out.shape[1:]}, expected {expected}")
            maps[dom + "pg"], maps[dom + "ng"] = E.take(out, 0, B), E.take(out, B, 2 * B)
            for half in "pn":
                logits[dom + half], d = self._head(maps[f"{dom}{half}g"], dom + "d")
                vectors["d_" + dom + half] = d.data
        if self.cfg.domains == "dual":
            for half in "pn":
                logit, u, d_j = self.ddam_forward(maps[f"t{half}g"], maps[f"f{half}g"])
                logits["j" + half] = logit
                vectors["d_j" + half] = d_j.data
                if u is not None:
                    attention["u_" + half] = u.data
        ordered = {k: logits[k] for k in HEADS if k in logits}
        return ForwardOutputs(ordered, maps, vectors, attention)

    def __call__(self, batch, training=False):
        return self.forward(batch, training)


def compute_losses(out: ForwardOutputs, y, lam: float = 1.0) -> LossBreakdown:
    """Classification + cycle-consistency losses, averaged over the batch.

    ``L_cls`` sums the BCE of every head present; ``L_c`` is the
    bidirectional KL between sigmoid block-3 maps of the two half-cycles.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    per_head = [E.bce_with_logits(z, y) for z in out.logits.values()]
    cls = per_head[0]
    for h in per_head[1:]:
        cls = cls + h
    l_cls = cls.mean()
    kl = {}
    for dom in "tf":
        if dom + "pg" in out.maps:
            kl[dom] = E.bidirectional_kl(E.sigmoid(out.maps[dom + "pg"]),
                                         E.sigmoid(out.maps[dom + "ng"]))
    total = l_cls
    if lam > 0:
        for v in kl.values():
            total = total + v * lam
    return LossBreakdown(
        total=total, l_cls=float(l_cls.data),
        l_ct=float(kl["t"].data) if "t" in kl else 0.0,
        l_cf=float(kl["f"].data) if "f" in kl else 0.0,
        lam=lam)


def predict(out: ForwardOutputs) -> np.ndarray:
    """Mean of the head probabilities, one value per batch element."""
    probs = out.probs
    return sum(probs[k] for k in out.logits) / len(out.logits)
