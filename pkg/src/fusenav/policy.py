"""Fusion policy architectures and the recurrent actor-critic controller.

Five visual encoders over 1D observation stacks:

  simple      channels stacked, two conv1d+GroupNorm+ReLU blocks, linear embed
  se_avg/max  simple trunk with channel-attention gates (pool -> FC -> ReLU ->
              FC -> sigmoid) after the input layer and after each conv block
  mid_fusion  one simple trunk per channel, branch embeddings concatenated
              then linearly mapped to the embedding size
  late_fusion an ensemble of frozen single-channel policies mixed by a policy
              fusion module: action probs y = A^T w, where w is a softmax over
              sub-policies computed by a simple-trunk encoder on the stacked
              input; the critic mixes sub values with the same w

The controller projects the previous action (one-hot) and the relative goal
(rho, cos phi, sin phi) to small vectors, concatenates them with the
embedding, and runs a two-layer LSTM into linear actor (4 logits) and critic
(1 value) heads. All forward passes record traces for exact reverse-mode
backward passes; gradients accumulate into a flat vector matching the
parameter layout.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import Pose, euclidean, wrap_angle
from .nnops import (Adam, ParamLayout, conv1d_bwd, conv1d_fwd, groupnorm_bwd,
                    groupnorm_fwd, init_vector, linear_bwd, linear_fwd,
                    lstm_bwd, lstm_fwd, relu_bwd, relu_fwd, se_bwd, se_fwd,
                    softmax_bwd, softmax_fwd)
from .sensing import CHANNEL_NAMES, MidLevelStack

N_ACTIONS = 4
GOAL_DIM = 3

ARCHITECTURES = ("simple", "se_avg", "se_max", "mid_fusion", "late_fusion")

CKPT_FORMAT = "ckpt/1"


@dataclass(frozen=True)
class FusionSpec:
    architecture: str = "simple"
    channel_names: tuple[str, ...] = ("depth",)
    conv_widths: tuple[int, int] = (64, 128)
    conv_kernel: int = 3
    conv_stride: int = 2
    embed_dim: int = 128
    proj_dim: int = 16
    rnn_width: int = 128
    rnn_layers: int = 2
    gn_groups: int = 8
    se_reduction: int = 4
    obs_width: int = 64
    obs_fov: float = math.pi / 2
    obs_max_range: float = 5.0
    goal_rho_max: float = 15.0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if not self.channel_names:
            raise ValueError("channel_names must be non-empty")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ValueError("duplicate channel names")
        for name in self.channel_names:
            if name not in CHANNEL_NAMES:
                raise ValueError(f"unknown channel {name!r}")
        for width in self.conv_widths:
            if width % self.gn_groups:
                raise ValueError("conv widths must be divisible by gn_groups")
        if self.conv_len(self.obs_width) < 1:
            raise ValueError("observation too narrow for the conv stack")

    def conv_len(self, length: int) -> int:
        for _ in self.conv_widths:
            length = (length - self.conv_kernel) // self.conv_stride + 1
        return length

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["channel_names"] = list(self.channel_names)
        doc["conv_widths"] = list(self.conv_widths)
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "FusionSpec":
        doc = dict(doc)
        doc["channel_names"] = tuple(doc["channel_names"])
        doc["conv_widths"] = tuple(doc["conv_widths"])
        return cls(**doc)


@dataclass
class PolicyParams:
    """Flat float64 parameter vector plus its named layout."""

    layout: ParamLayout
    vector: np.ndarray
    init_seed: int = 0

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.vector, name)

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.vector)

    @property
    def count(self) -> int:
        return self.vector.size


@dataclass
class RecurrentState:
    """Per-layer LSTM hidden and cell states, zeroed at episode start."""

    h: np.ndarray   # (layers, B, H)
    c: np.ndarray
    subs: list["RecurrentState"] | None = None   # late fusion only

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.h.copy(), self.c.copy(),
                              None if self.subs is None
                              else [s.copy() for s in self.subs])


@dataclass
class PolicyOutput:
    logits: np.ndarray        # (4,); log action probs for late fusion
    action_probs: np.ndarray  # (4,)
    value: float
    aux: dict = field(default_factory=dict)


def _divisor_reduction(channels: int, preferred: int) -> int:
    for r in range(min(preferred, channels), 0, -1):
        if channels % r == 0:
            return r
    return 1


# -- layout ------------------------------------------------------------------


def _register_trunk(layout: ParamLayout, spec: FusionSpec, prefix: str,
                    in_channels: int, embed_dim: int, with_se: bool):
    k = spec.conv_kernel
    c1, c2 = spec.conv_widths
    if with_se:
        for name, c in (("se0", in_channels), ("se1", c1), ("se2", c2)):
            # largest divisor of c at most se_reduction keeps c // r integral
            cr = c // _divisor_reduction(c, spec.se_reduction)
            layout.register(f"{prefix}{name}.fc1.W", (cr, c))
            layout.register(f"{prefix}{name}.fc1.b", (cr,))
            layout.register(f"{prefix}{name}.fc2.W", (c, cr))
            layout.register(f"{prefix}{name}.fc2.b", (c,))
    layout.register(f"{prefix}conv1.W", (c1, in_channels, k))
    layout.register(f"{prefix}conv1.b", (c1,))
    layout.register(f"{prefix}gn1.gamma", (c1,))
    layout.register(f"{prefix}gn1.beta", (c1,))
    layout.register(f"{prefix}conv2.W", (c2, c1, k))
    layout.register(f"{prefix}conv2.b", (c2,))
    layout.register(f"{prefix}gn2.gamma", (c2,))
    layout.register(f"{prefix}gn2.beta", (c2,))
    flat = c2 * spec.conv_len(spec.obs_width)
    layout.register(f"{prefix}embed.W", (embed_dim, flat))
    layout.register(f"{prefix}embed.b", (embed_dim,))


def _register_controller(layout: ParamLayout, spec: FusionSpec):
    h = spec.rnn_width
    layout.register("proj_a.W", (spec.proj_dim, N_ACTIONS))
    layout.register("proj_a.b", (spec.proj_dim,))
    layout.register("proj_g.W", (spec.proj_dim, GOAL_DIM))
    layout.register("proj_g.b", (spec.proj_dim,))
    in_dim = spec.embed_dim + 2 * spec.proj_dim
    for layer in range(spec.rnn_layers):
        layout.register(f"lstm{layer}.Wx", (4 * h, in_dim))
        layout.register(f"lstm{layer}.Wh", (4 * h, h))
        layout.register(f"lstm{layer}.b", (4 * h,))
        in_dim = h
    layout.register("actor.W", (N_ACTIONS, h))
    layout.register("actor.b", (N_ACTIONS,))
    layout.register("critic.W", (1, h))
    layout.register("critic.b", (1,))


def build_layout(spec: FusionSpec, n_sub_policies: int = 0) -> ParamLayout:
    """Parameter layout for one architecture.

    For late_fusion this is the policy-fusion-module layout only; the frozen
    sub-policies keep their own vectors.
    """
    layout = ParamLayout()
    k_chan = len(spec.channel_names)
    if spec.architecture in ("simple", "se_avg", "se_max"):
        _register_trunk(layout, spec, "", k_chan, spec.embed_dim,
                        with_se=spec.architecture in ("se_avg", "se_max"))
        _register_controller(layout, spec)
    elif spec.architecture == "mid_fusion":
        for b in range(k_chan):
            _register_trunk(layout, spec, f"branch{b}.", 1, spec.embed_dim,
                            with_se=False)
        layout.register("head.W", (spec.embed_dim, k_chan * spec.embed_dim))
        layout.register("head.b", (spec.embed_dim,))
        _register_controller(layout, spec)
    elif spec.architecture == "late_fusion":
        if n_sub_policies < 2:
            raise ValueError("late fusion requires >= 2 sub-policies")
        _register_trunk(layout, spec, "pfm.", k_chan, spec.embed_dim,
                        with_se=False)
        layout.register("pfm_head.W", (n_sub_policies, spec.embed_dim))
        layout.register("pfm_head.b", (n_sub_policies,))
    return layout


def init_params(spec: FusionSpec, seed: int, n_sub_policies: int = 0) -> PolicyParams:
    layout = build_layout(spec, n_sub_policies)
    ortho = tuple(f"lstm{i}.Wh" for i in range(spec.rnn_layers))
    fbias = tuple(f"lstm{i}.b" for i in range(spec.rnn_layers))
    vec = init_vector(layout, seed, orthogonal=ortho, forget_bias=fbias)
    return PolicyParams(layout=layout, vector=vec, init_seed=seed)


# -- encoder forward/backward ---------------------------------------------------


def _trunk_fwd(spec: FusionSpec, params: PolicyParams, prefix: str,
               x: np.ndarray, se_mode: str | None,
               gate_override: float | None = None):
    p = params.view
    caches = {}
    if se_mode is not None:
        x, caches["se0"] = se_fwd(x, p(f"{prefix}se0.fc1.W"), p(f"{prefix}se0.fc1.b"),
                                  p(f"{prefix}se0.fc2.W"), p(f"{prefix}se0.fc2.b"),
                                  se_mode, gate_override)
    y, caches["conv1"] = conv1d_fwd(x, p(f"{prefix}conv1.W"), p(f"{prefix}conv1.b"),
                                    spec.conv_stride)
    y, caches["gn1"] = groupnorm_fwd(y, p(f"{prefix}gn1.gamma"), p(f"{prefix}gn1.beta"),
                                     spec.gn_groups)
    y, caches["relu1"] = relu_fwd(y)
    if se_mode is not None:
        y, caches["se1"] = se_fwd(y, p(f"{prefix}se1.fc1.W"), p(f"{prefix}se1.fc1.b"),
                                  p(f"{prefix}se1.fc2.W"), p(f"{prefix}se1.fc2.b"),
                                  se_mode, gate_override)
    y, caches["conv2"] = conv1d_fwd(y, p(f"{prefix}conv2.W"), p(f"{prefix}conv2.b"),
                                    spec.conv_stride)
    y, caches["gn2"] = groupnorm_fwd(y, p(f"{prefix}gn2.gamma"), p(f"{prefix}gn2.beta"),
                                     spec.gn_groups)
    y, caches["relu2"] = relu_fwd(y)
    if se_mode is not None:
        y, caches["se2"] = se_fwd(y, p(f"{prefix}se2.fc1.W"), p(f"{prefix}se2.fc1.b"),
                                  p(f"{prefix}se2.fc2.W"), p(f"{prefix}se2.fc2.b"),
                                  se_mode, gate_override)
    caches["shape"] = y.shape
    flat = y.reshape(y.shape[0], -1)
    emb, caches["embed"] = linear_fwd(flat, p(f"{prefix}embed.W"), p(f"{prefix}embed.b"))
    return emb, caches


def _trunk_bwd(spec: FusionSpec, params: PolicyParams, prefix: str,
               caches: dict, demb: np.ndarray, grad: np.ndarray,
               se_mode: str | None) -> np.ndarray:
    layout = params.layout
    g = lambda name: layout.view(grad, prefix + name)
    dflat = linear_bwd(demb, caches["embed"], g("embed.W"), g("embed.b"))
    dy = dflat.reshape(caches["shape"])
    if se_mode is not None:
        dy = se_bwd(dy, caches["se2"], g("se2.fc1.W"), g("se2.fc1.b"),
                    g("se2.fc2.W"), g("se2.fc2.b"))
    dy = relu_bwd(dy, caches["relu2"])
    dy = groupnorm_bwd(dy, caches["gn2"], g("gn2.gamma"), g("gn2.beta"))
    dy = conv1d_bwd(dy, caches["conv2"], g("conv2.W"), g("conv2.b"))
    if se_mode is not None:
        dy = se_bwd(dy, caches["se1"], g("se1.fc1.W"), g("se1.fc1.b"),
                    g("se1.fc2.W"), g("se1.fc2.b"))
    dy = relu_bwd(dy, caches["relu1"])
    dy = groupnorm_bwd(dy, caches["gn1"], g("gn1.gamma"), g("gn1.beta"))
    dy = conv1d_bwd(dy, caches["conv1"], g("conv1.W"), g("conv1.b"))
    if se_mode is not None:
        dy = se_bwd(dy, caches["se0"], g("se0.fc1.W"), g("se0.fc1.b"),
                    g("se0.fc2.W"), g("se0.fc2.b"))
    return dy


def encoder_forward(spec: FusionSpec, params: PolicyParams, obs: np.ndarray,
                    gate_override: float | None = None, prefix: str = ""):
    """obs: (B, K, W) normalized channels -> (embedding (B, E), cache)."""
    arch = spec.architecture
    if obs.shape[1] != len(spec.channel_names):
        raise ValueError(f"expected {len(spec.channel_names)} channels, "
                         f"got {obs.shape[1]}")
    if arch == "simple":
        return _trunk_fwd(spec, params, prefix, obs, None)
    if arch in ("se_avg", "se_max"):
        mode = "avg" if arch == "se_avg" else "max"
        return _trunk_fwd(spec, params, prefix, obs, mode, gate_override)
    if arch == "mid_fusion":
        embs, caches = [], []
        for b in range(obs.shape[1]):
            emb_b, cache_b = _trunk_fwd(spec, params, f"{prefix}branch{b}.",
                                        obs[:, b:b + 1, :], None)
            embs.append(emb_b)
            caches.append(cache_b)
        stacked = np.concatenate(embs, axis=1)
        emb, head_cache = linear_fwd(stacked, params.view(f"{prefix}head.W"),
                                     params.view(f"{prefix}head.b"))
        return emb, {"branches": caches, "head": head_cache,
                     "branch_dim": spec.embed_dim}
    raise ValueError(f"encoder_forward does not handle {arch}")


def encoder_backward(spec: FusionSpec, params: PolicyParams, cache,
                     demb: np.ndarray, grad: np.ndarray,
                     prefix: str = "") -> np.ndarray:
    arch = spec.architecture
    if arch == "simple":
        return _trunk_bwd(spec, params, prefix, cache, demb, grad, None)
    if arch in ("se_avg", "se_max"):
        mode = "avg" if arch == "se_avg" else "max"
        return _trunk_bwd(spec, params, prefix, cache, demb, grad, mode)
    if arch == "mid_fusion":
        g = lambda name: params.layout.view(grad, prefix + name)
        dstacked = linear_bwd(demb, cache["head"], g("head.W"), g("head.b"))
        e = cache["branch_dim"]
        dxs = []
        for b, cache_b in enumerate(cache["branches"]):
            dxs.append(_trunk_bwd(spec, params, f"{prefix}branch{b}.", cache_b,
                                  dstacked[:, b * e:(b + 1) * e], grad, None))
        return np.concatenate(dxs, axis=1)
    raise ValueError(f"encoder_backward does not handle {arch}")


# -- controller ----------------------------------------------------------------


def zero_state(spec: FusionSpec, batch: int) -> RecurrentState:
    return RecurrentState(h=np.zeros((spec.rnn_layers, batch, spec.rnn_width)),
                          c=np.zeros((spec.rnn_layers, batch, spec.rnn_width)))


def controller_forward(spec: FusionSpec, params: PolicyParams, emb: np.ndarray,
                       prev_onehot: np.ndarray, goal_vec: np.ndarray,
                       state: RecurrentState):
    """Returns (logits (B, 4), value (B,), new_state, cache)."""
    if prev_onehot.shape[1] != N_ACTIONS or goal_vec.shape[1] != GOAL_DIM:
        raise ValueError("prev action must be one-hot(4), goal vector 3-d")
    p = params.view
    pa, cache_pa = linear_fwd(prev_onehot, p("proj_a.W"), p("proj_a.b"))
    pg, cache_pg = linear_fwd(goal_vec, p("proj_g.W"), p("proj_g.b"))
    x = np.concatenate([emb, pa, pg], axis=1)
    new_h = np.empty_like(state.h)
    new_c = np.empty_like(state.c)
    lstm_caches = []
    inp = x
    for layer in range(spec.rnn_layers):
        h_new, c_new, cache_l = lstm_fwd(inp, state.h[layer], state.c[layer],
                                         p(f"lstm{layer}.Wx"), p(f"lstm{layer}.Wh"),
                                         p(f"lstm{layer}.b"))
        new_h[layer] = h_new
        new_c[layer] = c_new
        lstm_caches.append(cache_l)
        inp = h_new
    logits, cache_actor = linear_fwd(inp, p("actor.W"), p("actor.b"))
    value, cache_critic = linear_fwd(inp, p("critic.W"), p("critic.b"))
    cache = (cache_pa, cache_pg, lstm_caches, cache_actor, cache_critic,
             emb.shape[1])
    return logits, value[:, 0], RecurrentState(new_h, new_c), cache


def controller_backward(spec: FusionSpec, params: PolicyParams, cache,
                        dlogits: np.ndarray, dvalue: np.ndarray,
                        dstate: tuple[np.ndarray, np.ndarray] | None,
                        grad: np.ndarray):
    """Returns (demb, (dh_prev, dc_prev)) for BPTT chaining."""
    cache_pa, cache_pg, lstm_caches, cache_actor, cache_critic, e = cache
    g = lambda name: params.layout.view(grad, name)
    dh_top = linear_bwd(dlogits, cache_actor, g("actor.W"), g("actor.b"))
    dh_top = dh_top + linear_bwd(dvalue[:, None], cache_critic,
                                 g("critic.W"), g("critic.b"))
    layers = spec.rnn_layers
    bsz = dh_top.shape[0]
    dh_prev = np.zeros((layers, bsz, spec.rnn_width))
    dc_prev = np.zeros((layers, bsz, spec.rnn_width))
    dh_in = dh_top
    if dstate is not None:
        dh_next, dc_next = dstate
    else:
        dh_next = np.zeros((layers, bsz, spec.rnn_width))
        dc_next = np.zeros((layers, bsz, spec.rnn_width))
    dx = None
    for layer in reversed(range(layers)):
        dh_total = dh_in + dh_next[layer]
        dx, dh_l, dc_l = lstm_bwd(dh_total, dc_next[layer], lstm_caches[layer],
                                  g(f"lstm{layer}.Wx"), g(f"lstm{layer}.Wh"),
                                  g(f"lstm{layer}.b"))
        dh_prev[layer] = dh_l
        dc_prev[layer] = dc_l
        dh_in = dx
    demb = dx[:, :e]
    dpa = dx[:, e:e + spec.proj_dim]
    dpg = dx[:, e + spec.proj_dim:]
    linear_bwd(dpa, cache_pa, g("proj_a.W"), g("proj_a.b"))
    linear_bwd(dpg, cache_pg, g("proj_g.W"), g("proj_g.b"))
    return demb, (dh_prev, dc_prev)


# -- full policies -----------------------------------------------------------------


@dataclass
class Policy:
    """A bound (spec, params) pair; late fusion also carries frozen subs."""

    spec: FusionSpec
    params: PolicyParams
    subs: list["Policy"] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.spec.architecture == "late_fusion":
            if not self.subs or len(self.subs) < 2:
                raise ValueError("late fusion requires >= 2 sub-policies")
            union = set(self.spec.channel_names)
            for sub in self.subs:
                if sub.spec.architecture == "late_fusion":
                    raise ValueError("late fusion cannot nest")
                if not set(sub.spec.channel_names) <= union:
                    raise ValueError("sub-policy channels missing from spec")
        elif self.subs:
            raise ValueError("only late fusion takes sub-policies")

    @property
    def n_subs(self) -> int:
        return len(self.subs) if self.subs else 0

    def initial_state(self, batch: int = 1) -> RecurrentState:
        if self.spec.architecture == "late_fusion":
            return RecurrentState(
                h=np.zeros((0, batch, 0)), c=np.zeros((0, batch, 0)),
                subs=[sub.initial_state(batch) for sub in self.subs])
        return zero_state(self.spec, batch)

    def _sub_slices(self) -> list[list[int]]:
        return [[self.spec.channel_names.index(name)
                 for name in sub.spec.channel_names] for sub in self.subs]

    def forward(self, obs: np.ndarray, prev_onehot: np.ndarray,
                goal_vec: np.ndarray, state: RecurrentState,
                need_trace: bool = True, gate_override: float | None = None):
        """Batched one-step forward.

        Returns (probs (B, 4), values (B,), new_state, trace). The trace is
        None when need_trace is False (rollout collection without gradients).
        """
        if self.spec.architecture != "late_fusion":
            emb, enc_cache = encoder_forward(self.spec, self.params, obs,
                                             gate_override)
            logits, value, new_state, ctl_cache = controller_forward(
                self.spec, self.params, emb, prev_onehot, goal_vec, state)
            probs, sm_cache = softmax_fwd(logits)
            trace = ((enc_cache, ctl_cache, sm_cache) if need_trace else None)
            return probs, value, new_state, trace

        slices = self._sub_slices()
        cand = np.empty((obs.shape[0], self.n_subs, N_ACTIONS))
        vals = np.empty((obs.shape[0], self.n_subs))
        new_subs = []
        for i, sub in enumerate(self.subs):
            p_i, v_i, s_i, _ = sub.forward(obs[:, slices[i], :], prev_onehot,
                                           goal_vec, state.subs[i],
                                           need_trace=False)
            cand[:, i, :] = p_i
            vals[:, i] = v_i
            new_subs.append(s_i)
        emb, enc_cache = encoder_forward(
            replace(self.spec, architecture="simple"), self.params, obs,
            prefix="pfm.")
        w_logits, head_cache = linear_fwd(emb, self.params.view("pfm_head.W"),
                                          self.params.view("pfm_head.b"))
        w, sm_cache = softmax_fwd(w_logits)
        probs = np.einsum("bi,bia->ba", w, cand)
        value = (w * vals).sum(axis=1)
        new_state = RecurrentState(h=state.h, c=state.c, subs=new_subs)
        trace = ((enc_cache, head_cache, sm_cache, cand, vals, w)
                 if need_trace else None)
        return probs, value, new_state, trace

    def backward(self, trace, dprobs: np.ndarray, dvalue: np.ndarray,
                 grad: np.ndarray,
                 dstate: tuple[np.ndarray, np.ndarray] | None = None,
                 gate_override: float | None = None):
        """Accumulate parameter gradients; returns (dh_prev, dc_prev).

        For late fusion the sub-policies are frozen: only policy-fusion-module
        gradients are produced and the returned state gradient is None.
        """
        if trace is None:
            raise ValueError("forward was run without a trace")
        if self.spec.architecture != "late_fusion":
            enc_cache, ctl_cache, sm_cache = trace
            dlogits = softmax_bwd(dprobs, sm_cache)
            demb, dstate_prev = controller_backward(
                self.spec, self.params, ctl_cache, dlogits, dvalue, dstate, grad)
            encoder_backward(self.spec, self.params, enc_cache, demb, grad)
            return dstate_prev

        enc_cache, head_cache, sm_cache, cand, vals, w = trace
        dw = np.einsum("ba,bia->bi", dprobs, cand) + dvalue[:, None] * vals
        dw_logits = softmax_bwd(dw, sm_cache)
        g = lambda name: self.params.layout.view(grad, name)
        demb = linear_bwd(dw_logits, head_cache, g("pfm_head.W"), g("pfm_head.b"))
        encoder_backward(replace(self.spec, architecture="simple"),
                         self.params, enc_cache, demb, grad, prefix="pfm.")
        return None

    # -- single-pose convenience -------------------------------------------

    def act(self, stack: MidLevelStack, prev_action: int | None,
            goal_vec: np.ndarray, state: RecurrentState,
            rng: np.random.Generator | None = None) -> tuple[PolicyOutput, RecurrentState]:
        """One observation in, one action out; greedy unless an rng is given."""
        obs = stack_to_input(stack, self.spec)[None, :, :]
        prev = np.zeros((1, N_ACTIONS))
        if prev_action is not None:
            prev[0, prev_action] = 1.0
        probs, value, new_state, _ = self.forward(
            obs, prev, np.asarray(goal_vec, dtype=float)[None, :], state,
            need_trace=False)
        p = probs[0]
        if rng is None:
            action = int(np.argmax(p))
        else:
            action = int(rng.choice(N_ACTIONS, p=p / p.sum()))
        out = PolicyOutput(logits=np.log(np.maximum(p, 1e-300)), action_probs=p,
                           value=float(value[0]), aux={"action": action})
        return out, new_state


# -- observation/goal plumbing ---------------------------------------------------


def stack_to_input(stack: MidLevelStack, spec: FusionSpec) -> np.ndarray:
    """Select the spec's channels from a stack and normalize them to ~[0, 1]."""
    rows = []
    for name in spec.channel_names:
        vals = stack.channel(name)
        if name == "depth":
            rows.append(vals / stack.max_range)
        elif name == "normals":
            rows.append(vals / (math.pi / 2))
        else:
            rows.append(vals)
    return np.stack(rows)


def goal_vector(pose: Pose, goal: tuple[float, float], rho_max: float) -> np.ndarray:
    """Agent-relative polar goal encoding (rho clipped/normalized, cos, sin)."""
    rho = euclidean(pose.x, pose.z, goal[0], goal[1])
    phi = math.atan2(goal[1] - pose.z, goal[0] - pose.x) - pose.theta
    return np.array([min(rho, rho_max) / rho_max, math.cos(phi), math.sin(phi)])


def relative_goal(pose: Pose, goal: tuple[float, float]) -> tuple[float, float]:
    """Goal position in the agent's egocentric frame (forward = +x)."""
    dx, dz = goal[0] - pose.x, goal[1] - pose.z
    c, s = math.cos(-pose.theta), math.sin(-pose.theta)
    return (c * dx - s * dz, s * dx + c * dz)


def goal_vector_from_relative(rel: tuple[float, float], rho_max: float) -> np.ndarray:
    rho = math.hypot(rel[0], rel[1])
    phi = math.atan2(rel[1], rel[0])
    return np.array([min(rho, rho_max) / rho_max, math.cos(phi), math.sin(phi)])


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(policy: Policy, path: str, metadata: dict | None = None):
    header = {
        "format": CKPT_FORMAT,
        "spec": policy.spec.to_doc(),
        "layout": policy.params.layout.to_doc(),
        "init_seed": policy.params.init_seed,
        "metadata": metadata or policy.metadata,
        "subs": [{"spec": sub.spec.to_doc(),
                  "layout": sub.params.layout.to_doc(),
                  "init_seed": sub.params.init_seed,
                  "metadata": sub.metadata}
                 for sub in (policy.subs or [])],
    }
    payloads = [policy.params.vector] + [s.params.vector for s in (policy.subs or [])]
    with open(path, "wb") as fh:
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        for vec in payloads:
            fh.write(vec.astype("<f8").tobytes())


def load_checkpoint(path: str) -> Policy:
    with open(path, "rb") as fh:
        head_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(head_len).decode("utf-8"))
        if header.get("format") != CKPT_FORMAT:
            raise ValueError(f"not a {CKPT_FORMAT} file: {path}")
        raw = np.frombuffer(fh.read(), dtype="<f8")

    spec = FusionSpec.from_doc(header["spec"])
    layout = ParamLayout.from_doc(header["layout"])
    offset = layout.size
    params = PolicyParams(layout=layout, vector=raw[:offset].copy(),
                          init_seed=int(header.get("init_seed", 0)))
    subs = []
    for sub_doc in header.get("subs", []):
        sub_spec = FusionSpec.from_doc(sub_doc["spec"])
        sub_layout = ParamLayout.from_doc(sub_doc["layout"])
        sub_vec = raw[offset:offset + sub_layout.size].copy()
        offset += sub_layout.size
        subs.append(Policy(spec=sub_spec,
                           params=PolicyParams(sub_layout, sub_vec,
                                               int(sub_doc.get("init_seed", 0))),
                           metadata=sub_doc.get("metadata", {})))
    if offset != raw.size:
        raise ValueError("checkpoint payload does not match layouts")
    return Policy(spec=spec, params=params, subs=subs or None,
                  metadata=header.get("metadata", {}))
