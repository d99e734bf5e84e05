"""Recurrent cells, the seq2seq prediction policy, and the critic network.

All forward passes run on batches internally; sequences travel as lists of
(batch, dim) tensors so the per-sequence public entry points are just the
batch-of-one case.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "GruCell",
    "LstmCell",
    "Policy",
    "Critic",
    "gru_step",
    "lstm_step",
    "policy_forward",
    "critic_forward",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class CheckpointError(Exception):
    pass


def _frames(seq, dtype) -> list[Tensor]:
    """Split an (L, d) array or tensor into a list of (1, d) row tensors."""
    if isinstance(seq, Tensor):
        if seq.values.ndim != 2:
            raise ad.ShapeError(f"expected an (L, d) sequence, got shape {seq.shape}")
        return [seq[i : i + 1, :] for i in range(seq.shape[0])]
    arr = np.asarray(seq, dtype=dtype)
    if arr.ndim != 2:
        raise ad.ShapeError(f"expected an (L, d) sequence, got shape {arr.shape}")
    return [Tensor(arr[i : i + 1, :]) for i in range(arr.shape[0])]


def batch_frames(arr, dtype) -> list[Tensor]:
    """Split a (B, L, d) array into a list of L constant (B, d) tensors."""
    arr = np.asarray(arr, dtype=dtype)
    if arr.ndim != 3:
        raise ad.ShapeError(f"expected a (B, L, d) batch, got shape {arr.shape}")
    return [Tensor(np.ascontiguousarray(arr[:, i, :])) for i in range(arr.shape[1])]


class GruCell:
    """Gated recurrent unit: h' = (1 - z) * h + z * tanh(Wx + U(r*h) + b)."""

    GATES = ("z", "r", "h")

    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        self.input_dim = input_dim
        self.hidden = hidden
        self.dtype = np.dtype(dtype)
        self.p: dict[str, Tensor] = {}
        for gate in self.GATES:
            if rng is None:
                self.p[f"w_{gate}"] = Tensor(np.zeros((input_dim, hidden), dtype=dtype))
                self.p[f"u_{gate}"] = Tensor(np.zeros((hidden, hidden), dtype=dtype))
                self.p[f"b_{gate}"] = Tensor(np.zeros(hidden, dtype=dtype))
            else:
                self.p[f"w_{gate}"] = ad.init_uniform((input_dim, hidden), input_dim, rng, dtype)
                self.p[f"u_{gate}"] = ad.init_uniform((hidden, hidden), hidden, rng, dtype)
                self.p[f"b_{gate}"] = ad.init_uniform((hidden,), hidden, rng, dtype)

    def named_params(self, prefix=""):
        return [(prefix + k, self.p[k]) for k in sorted(self.p)]

    def zero_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden), dtype=self.dtype))

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[1] != self.input_dim or h.shape[1] != self.hidden:
            raise ad.ShapeError(
                f"gru_step: got x {x.shape}, h {h.shape} for cell ({self.input_dim}, {self.hidden})"
            )
        p = self.p
        z = ad.sigmoid(ad.add_rowvec(ad.matmul(x, p["w_z"]) + ad.matmul(h, p["u_z"]), p["b_z"]))
        r = ad.sigmoid(ad.add_rowvec(ad.matmul(x, p["w_r"]) + ad.matmul(h, p["u_r"]), p["b_r"]))
        cand = ad.tanh(
            ad.add_rowvec(ad.matmul(x, p["w_h"]) + ad.matmul(ad.mul(r, h), p["u_h"]), p["b_h"])
        )
        return (h - ad.mul(z, h)) + ad.mul(z, cand)


class LstmCell:
    """Standard LSTM; the forget-gate bias starts at 1."""

    GATES = ("i", "f", "o", "c")

    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        self.input_dim = input_dim
        self.hidden = hidden
        self.dtype = np.dtype(dtype)
        self.p: dict[str, Tensor] = {}
        for gate in self.GATES:
            if rng is None:
                self.p[f"w_{gate}"] = Tensor(np.zeros((input_dim, hidden), dtype=dtype))
                self.p[f"u_{gate}"] = Tensor(np.zeros((hidden, hidden), dtype=dtype))
                self.p[f"b_{gate}"] = Tensor(np.zeros(hidden, dtype=dtype))
            else:
                self.p[f"w_{gate}"] = ad.init_uniform((input_dim, hidden), input_dim, rng, dtype)
                self.p[f"u_{gate}"] = ad.init_uniform((hidden, hidden), hidden, rng, dtype)
                self.p[f"b_{gate}"] = ad.init_uniform((hidden,), hidden, rng, dtype)
        if rng is not None:
            self.p["b_f"] = Tensor(np.ones(hidden, dtype=dtype))

    def named_params(self, prefix=""):
        return [(prefix + k, self.p[k]) for k in sorted(self.p)]

    def zero_state(self, batch: int):
        z = np.zeros((batch, self.hidden), dtype=self.dtype)
        return Tensor(z), Tensor(z.copy())

    def step(self, x: Tensor, h: Tensor, c: Tensor):
        if x.shape[1] != self.input_dim or h.shape[1] != self.hidden:
            raise ad.ShapeError(
                f"lstm_step: got x {x.shape}, h {h.shape} for cell ({self.input_dim}, {self.hidden})"
            )
        p = self.p

        def gate(name, squash):
            pre = ad.add_rowvec(
                ad.matmul(x, p[f"w_{name}"]) + ad.matmul(h, p[f"u_{name}"]), p[f"b_{name}"]
            )
            return squash(pre)

        i = gate("i", ad.sigmoid)
        f = gate("f", ad.sigmoid)
        o = gate("o", ad.sigmoid)
        cand = gate("c", ad.tanh)
        c_new = ad.mul(f, c) + ad.mul(i, cand)
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new

    def run(self, frames, state=None):
        """Feed frames in order; returns (per-step hidden list, final (h, c))."""
        if state is None:
            h, c = self.zero_state(frames[0].shape[0])
        else:
            h, c = state
        hs = []
        for x in frames:
            h, c = self.step(x, h, c)
            hs.append(h)
        return hs, (h, c)


def gru_step(x, h, params: GruCell) -> Tensor:
    """Single-vector GRU step: x (input_dim,), h (hidden,) -> (hidden,)."""
    xr = ad.reshape(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.dtype)),
                    (1, params.input_dim))
    hr = ad.reshape(h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=params.dtype)),
                    (1, params.hidden))
    return ad.reshape(params.step(xr, hr), (params.hidden,))


def lstm_step(x, h, c, params: LstmCell):
    """Single-vector LSTM step; returns (h', c') as (hidden,) tensors."""
    xr = ad.reshape(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.dtype)),
                    (1, params.input_dim))
    hr = ad.reshape(h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=params.dtype)),
                    (1, params.hidden))
    cr = ad.reshape(c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=params.dtype)),
                    (1, params.hidden))
    hn, cn = params.step(xr, hr, cr)
    return ad.reshape(hn, (params.hidden,)), ad.reshape(cn, (params.hidden,))


class Policy:
    """Seq2seq generator: GRU encoder over the state, GRU decoder emitting a
    length-m window through a linear spatial decoder.

    The decoder is autoregressive: its first input is the last state frame,
    after that its own previous output (or the ground-truth frame when a
    teacher sequence is supplied).
    """

    def __init__(self, pose_dim: int, hidden: int = 1024,
                 rng: np.random.Generator | None = None, dtype=np.float64,
                 residual_output: bool = False):
        self.pose_dim = pose_dim
        self.hidden = hidden
        self.dtype = np.dtype(dtype)
        self.residual_output = residual_output
        self.encoder = GruCell(pose_dim, hidden, rng, dtype)
        self.decoder = GruCell(pose_dim, hidden, rng, dtype)
        if rng is None:
            self.out_w = Tensor(np.zeros((hidden, pose_dim), dtype=dtype))
            self.out_b = Tensor(np.zeros(pose_dim, dtype=dtype))
        else:
            self.out_w = ad.init_uniform((hidden, pose_dim), hidden, rng, dtype)
            self.out_b = ad.init_uniform((pose_dim,), hidden, rng, dtype)

    def named_params(self):
        return (
            self.encoder.named_params("encoder.")
            + self.decoder.named_params("decoder.")
            + [("out.w", self.out_w), ("out.b", self.out_b)]
        )

    def param_tensors(self):
        return [t for _, t in self.named_params()]

    def load_state(self, named: dict[str, np.ndarray]):
        own = dict(self.named_params())
        if set(own) != set(named):
            missing = sorted(set(own) ^ set(named))
            raise CheckpointError(f"parameter names do not match; offending keys: {missing}")
        for name, t in own.items():
            arr = np.asarray(named[name], dtype=self.dtype)
            if arr.shape != t.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, model {t.shape}"
                )
            t.values = arr

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], dtype=np.float64,
                   residual_output: bool = False) -> "Policy":
        try:
            pose_dim, hidden = named["encoder.w_z"].shape
        except KeyError:
            raise CheckpointError("checkpoint does not contain policy parameters") from None
        policy = cls(pose_dim, hidden, rng=None, dtype=dtype, residual_output=residual_output)
        policy.load_state(named)
        return policy

    # -- forward passes ----------------------------------------------------

    def encode(self, frames, h: Tensor | None = None):
        """Run the encoder over frames, returning the hidden after each one."""
        if h is None:
            h = self.encoder.zero_state(frames[0].shape[0])
        hs = []
        for x in frames:
            h = self.encoder.step(x, h)
            hs.append(h)
        return hs

    def emit(self, h: Tensor, dec_in: Tensor) -> Tensor:
        out = ad.add_rowvec(ad.matmul(h, self.out_w), self.out_b)
        if self.residual_output:
            out = out + dec_in
        return out

    def decode(self, h: Tensor, first_in: Tensor, m: int, teacher=None):
        """Emit m frames; teacher, when given, replaces the fed-back outputs."""
        outs = []
        x = first_in
        for j in range(m):
            h = self.decoder.step(x, h)
            y = self.emit(h, x)
            outs.append(y)
            if j + 1 < m:
                x = teacher[j] if teacher is not None else y
        return outs

    def forward(self, state, m: int, teacher=None) -> Tensor:
        """Map one (L, pose_dim) state to an (m, pose_dim) action window."""
        if m < 1:
            raise ad.ShapeError("window length m must be >= 1")
        frames = _frames(state, self.dtype)
        if not frames:
            raise ad.ShapeError("policy_forward: empty state")
        if frames[0].shape[1] != self.pose_dim:
            raise ad.ShapeError(
                f"policy_forward: pose_dim {frames[0].shape[1]} != model {self.pose_dim}"
            )
        if teacher is not None:
            teacher = _frames(teacher, self.dtype)
        hs = self.encode(frames)
        outs = self.decode(hs[-1], frames[-1], m, teacher=teacher)
        return ad.reshape(ad.concat(outs, axis=1), (m, self.pose_dim))

    def agent_windows_graph(self, full: np.ndarray, ep):
        """Taped action windows at the compounded states of `full` (B, t+l, d).

        The state frames enter as constants (no gradient flows through the
        policy's earlier predictions), so differentiating a score of these
        windows w.r.t. the parameters yields the deterministic
        policy-gradient estimator.  One shared encoder pass provides every
        window's starting hidden, which equals restarting per state.
        """
        frames = batch_frames(full[:, : ep.t + (ep.K - 1) * ep.m], self.dtype)
        hs = self.encode(frames)
        windows = []
        for i in range(1, ep.K + 1):
            cut = ep.t + (i - 1) * ep.m
            windows.append(self.decode(hs[cut - 1], frames[cut - 1], ep.m))
        return windows

    def rollout_values(self, prefix: np.ndarray, steps: int, m: int) -> np.ndarray:
        """Compounding prediction on a (B, t, d) prefix batch, without taping.

        Returns the (B, steps*m, d) predicted continuation.
        """
        with ad.no_grad():
            frames = batch_frames(prefix, self.dtype)
            hs = self.encode(frames)
            h_enc = hs[-1]
            last = frames[-1]
            windows = []
            for _ in range(steps):
                outs = self.decode(h_enc, last, m)
                windows.extend(outs)
                hs = self.encode(outs, h=h_enc)
                h_enc = hs[-1]
                last = outs[-1]
        out = np.stack([w.values for w in windows], axis=1)
        return out


def policy_forward(state, policy: Policy, m: int) -> Tensor:
    return policy.forward(state, m)


class Critic:
    """Scores a (state, action) pair: two LSTM encoders, embeddings
    concatenated, then a leaky-ReLU MLP down to one real value.
    """

    DEFAULT_WIDTHS = (512, 256, 128, 64, 32, 16, 1)

    def __init__(self, pose_dim: int, hidden: int = 1024, mlp_widths=DEFAULT_WIDTHS,
                 leaky_slope: float = 0.2, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        mlp_widths = tuple(int(w) for w in mlp_widths)
        if not mlp_widths or mlp_widths[-1] != 1:
            raise ValueError("mlp_widths must end in 1")
        self.pose_dim = pose_dim
        self.hidden = hidden
        self.mlp_widths = mlp_widths
        self.leaky_slope = leaky_slope
        self.dtype = np.dtype(dtype)
        self.state_enc = LstmCell(pose_dim, hidden, rng, dtype)
        self.action_enc = LstmCell(pose_dim, hidden, rng, dtype)
        self.mlp: list[tuple[Tensor, Tensor]] = []
        fan = 2 * hidden
        for w in mlp_widths:
            if rng is None:
                wt = Tensor(np.zeros((fan, w), dtype=dtype))
                bt = Tensor(np.zeros(w, dtype=dtype))
            else:
                wt = ad.init_uniform((fan, w), fan, rng, dtype)
                bt = ad.init_uniform((w,), fan, rng, dtype)
            self.mlp.append((wt, bt))
            fan = w

    def named_params(self):
        named = self.state_enc.named_params("state_enc.")
        named += self.action_enc.named_params("action_enc.")
        for i, (w, b) in enumerate(self.mlp):
            named += [(f"mlp.{i}.w", w), (f"mlp.{i}.b", b)]
        return named

    def param_tensors(self):
        return [t for _, t in self.named_params()]

    def load_state(self, named: dict[str, np.ndarray]):
        own = dict(self.named_params())
        if set(own) != set(named):
            missing = sorted(set(own) ^ set(named))
            raise CheckpointError(f"parameter names do not match; offending keys: {missing}")
        for name, t in own.items():
            arr = np.asarray(named[name], dtype=self.dtype)
            if arr.shape != t.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, model {t.shape}"
                )
            t.values = arr

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], leaky_slope: float = 0.2,
                   dtype=np.float64) -> "Critic":
        try:
            pose_dim, hidden = named["state_enc.w_i"].shape
        except KeyError:
            raise CheckpointError("checkpoint does not contain critic parameters") from None
        widths = []
        i = 0
        while f"mlp.{i}.w" in named:
            widths.append(named[f"mlp.{i}.w"].shape[1])
            i += 1
        critic = cls(pose_dim, hidden, tuple(widths), leaky_slope, rng=None, dtype=dtype)
        critic.load_state(named)
        return critic

    def head(self, state_emb: Tensor, action_emb: Tensor) -> Tensor:
        """The MLP over the concatenated embeddings; returns (B, 1)."""
        x = ad.concat([state_emb, action_emb], axis=1)
        last = len(self.mlp) - 1
        for i, (w, b) in enumerate(self.mlp):
            x = ad.add_rowvec(ad.matmul(x, w), b)
            if i != last:
                x = ad.leaky_relu(x, self.leaky_slope)
        return x

    def state_embeddings(self, full: np.ndarray, ep) -> list:
        """Embed every step's growing state from a (B, t+l, d) value array.

        One encoder pass with a snapshot at each window boundary; identical
        to encoding each state from scratch.
        """
        frames = batch_frames(full[:, : ep.t + (ep.K - 1) * ep.m], self.dtype)
        hs, _ = self.state_enc.run(frames)
        return [hs[ep.t + (i - 1) * ep.m - 1] for i in range(1, ep.K + 1)]

    def action_embedding(self, action_frames) -> Tensor:
        _, (h, _) = self.action_enc.run(action_frames)
        return h

    def score_steps(self, state_frames, action_frames) -> Tensor:
        """Batched score from per-step (B, d) frame lists; returns (B, 1)."""
        if not state_frames or not action_frames:
            raise ad.ShapeError("critic: state and action must be nonempty")
        _, (hs, _) = self.state_enc.run(state_frames)
        _, (ha, _) = self.action_enc.run(action_frames)
        return self.head(hs, ha)

    def forward(self, state, action) -> Tensor:
        """Score one (L, d) state against one (m, d) action; returns a scalar."""
        sf = _frames(state, self.dtype)
        af = _frames(action, self.dtype)
        if not sf or not af:
            raise ad.ShapeError("critic_forward: empty state or action")
        if sf[0].shape[1] != self.pose_dim or af[0].shape[1] != self.pose_dim:
            raise ad.ShapeError("critic_forward: pose_dim mismatch")
        return ad.reshape(self.score_steps(sf, af), ())


def critic_forward(state, action, critic: Critic) -> Tensor:
    return critic.forward(state, action)


# ---------------------------------------------------------------------------
# Checkpoint container: little-endian, bit-exact round trip.
# ---------------------------------------------------------------------------

_MAGIC = b"POSEIMIT"
_VERSION = 1
_PRECISION_CODE = {"test": 0, "train": 1}
_PRECISION_NAME = {0: "test", 1: "train"}
_PRECISION_DTYPE = {"test": "<f8", "train": "<f4"}


def save_checkpoint(path, named_tensors, precision: str = "test"):
    """Write named tensors: header (magic, version, precision, count), then
    per-tensor records of name, rank, extents, raw little-endian values.
    """
    if precision not in _PRECISION_CODE:
        raise CheckpointError(f"unknown precision {precision!r}")
    dt = np.dtype(_PRECISION_DTYPE[precision])
    items = list(named_tensors.items()) if isinstance(named_tensors, dict) else list(named_tensors)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IBI", _VERSION, _PRECISION_CODE[precision], len(items)))
        for name, t in items:
            vals = t.values if isinstance(t, Tensor) else np.asarray(t)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", vals.ndim))
            for extent in vals.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(vals, dtype=dt).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (dict name -> ndarray, precision name)."""

    def take(fh, n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return buf

    with open(path, "rb") as fh:
        if take(fh, len(_MAGIC), "magic") != _MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, pcode, count = struct.unpack("<IBI", take(fh, 9, "header"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if pcode not in _PRECISION_NAME:
            raise CheckpointError(f"unknown precision code {pcode}")
        precision = _PRECISION_NAME[pcode]
        dt = np.dtype(_PRECISION_DTYPE[precision])
        named = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(fh, 4, "name length"))
            name = take(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", take(fh, 4, "rank"))
            shape = tuple(
                struct.unpack("<Q", take(fh, 8, "extent"))[0] for _ in range(rank)
            )
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = take(fh, n * dt.itemsize, f"values of {name}")
            named[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor record")
    return named, precision
