"""Two-timescale resource control for a small multi-link interference network.

Each link carries one semantic stream. A frame-scale decision picks beam and
transmit power per link; a slot-scale decision picks the compression ratio.
Both levels are learned by independent per-link Q-agents whose only coupling
is a shared term in the reward, and the payoff of any joint choice is read
off the codec's measured quality surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import COMPRESSION_CODEBOOK, QualitySurface, surface_lookup
from .errors import ContractViolation, ShapeMismatch, TrainingFault
from .metrics import MetricsTable
from .nn import Adam, Mlp, Rng, backward, forward, init_mlp, named_stream


# ---------------------------------------------------------------------------
# network configuration and physics


@dataclass(frozen=True)
class NetworkConfig:
    """Geometry, codebooks, and time structure of the interference network."""

    links: int = 4
    n_t: int = 4
    beam_count: int = 8
    power_levels: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    compression_levels: tuple[float, ...] = COMPRESSION_CODEBOOK
    noise_power: float = 0.2
    frame_slots: int = 10
    episode_slots: int = 20000
    fading: float = 0.99

    def __post_init__(self):
        if self.links < 1 or self.n_t < 1:
            raise ContractViolation("need at least one link and one antenna")
        if self.beam_count < 1:
            raise ContractViolation("beam codebook must be non-empty")
        if not self.power_levels or not self.compression_levels:
            raise ContractViolation("codebooks must be non-empty")
        if any(not 0.0 < p <= 1.0 for p in self.power_levels):
            raise ContractViolation("power levels must lie in (0, 1]")
        if list(self.power_levels) != sorted(self.power_levels):
            raise ContractViolation("power levels must ascend")
        if self.frame_slots < 1 or self.episode_slots < 1:
            raise ContractViolation("time structure must be positive")
        if not 0.0 <= self.fading <= 1.0:
            raise ContractViolation("fading correlation must lie in [0, 1]")

    @property
    def n_joint(self) -> int:
        return self.beam_count * len(self.power_levels)


def dft_codebook(n_t: int, beam_count: int) -> np.ndarray:
    """Unit-norm DFT beams, one per row: exp(i 2 pi n b / B) / sqrt(N_t)."""
    n = np.arange(n_t)
    b = np.arange(beam_count)[:, None]
    return np.exp(2j * np.pi * n * b / beam_count) / np.sqrt(n_t)


@dataclass
class NetworkState:
    """Channel matrix and the resource choices currently applied to it.

    h_re/h_im hold the complex vector channels as paired real tensors;
    entry [i, j] is the channel from transmitter j to receiver i.
    """

    h_re: np.ndarray  # (L, L, N_t)
    h_im: np.ndarray  # (L, L, N_t)
    beams: np.ndarray   # (L,) int indices into the DFT codebook
    powers: np.ndarray  # (L,) int indices into the power codebook

    def __post_init__(self):
        if self.h_re.shape != self.h_im.shape or self.h_re.ndim != 3:
            raise ShapeMismatch("channel tensors must be two matching (L, L, N_t) arrays")
        if self.h_re.shape[0] != self.h_re.shape[1]:
            raise ShapeMismatch("need one channel vector per transmitter-receiver pair")


def init_network(config: NetworkConfig, rng: Rng) -> NetworkState:
    """Fresh Rayleigh draw, unit average power per complex coefficient."""
    shape = (config.links, config.links, config.n_t)
    scale = np.sqrt(0.5)
    return NetworkState(
        h_re=rng.normal(0.0, scale, size=shape),
        h_im=rng.normal(0.0, scale, size=shape),
        beams=np.zeros(config.links, dtype=np.int64),
        powers=np.zeros(config.links, dtype=np.int64),
    )


def innovate(state: NetworkState, coeff: float, rng: Rng) -> None:
    """Gauss-Markov channel evolution: h <- c h + sqrt(1-c^2) w.

    Draws are consumed even at c=1 so a replay with the same stream stays
    aligned regardless of the correlation setting.
    """
    scale = np.sqrt(0.5)
    w_re = rng.normal(0.0, scale, size=state.h_re.shape)
    w_im = rng.normal(0.0, scale, size=state.h_im.shape)
    mix = math.sqrt(max(0.0, 1.0 - coeff * coeff))
    state.h_re *= coeff
    state.h_re += mix * w_re
    state.h_im *= coeff
    state.h_im += mix * w_im


def link_gains(state: NetworkState, beam_vectors: np.ndarray) -> np.ndarray:
    """G[i, j] = |h_ij^H w_j|^2 for the beams currently assigned per link."""
    w = beam_vectors[state.beams]  # (L, N_t) complex
    w_re, w_im = w.real, w.imag
    # h^H w with h = a + ib, w = c + id: (a c + b d) + i(a d - b c)
    re = np.einsum("ijn,jn->ij", state.h_re, w_re) + np.einsum(
        "ijn,jn->ij", state.h_im, w_im)
    im = np.einsum("ijn,jn->ij", state.h_re, w_im) - np.einsum(
        "ijn,jn->ij", state.h_im, w_re)
    return re * re + im * im


def compute_sinr(gains: np.ndarray, power_values: np.ndarray,
                 noise_power: float) -> np.ndarray:
    """SINR_i = p_i G_ii / (sum_{j != i} p_j G_ij + noise)."""
    gains = np.asarray(gains, dtype=np.float64)
    p = np.asarray(power_values, dtype=np.float64)
    if gains.ndim != 2 or gains.shape[0] != gains.shape[1]:
        raise ShapeMismatch("gain matrix must be square")
    if p.shape != (gains.shape[0],):
        raise ShapeMismatch("need one power per link")
    weighted = gains * p[None, :]
    signal = np.diag(weighted)
    interference = weighted.sum(axis=1) - signal
    return signal / (interference + noise_power)


def interference_plus_noise(gains: np.ndarray, power_values: np.ndarray,
                            noise_power: float) -> np.ndarray:
    weighted = gains * np.asarray(power_values)[None, :]
    return weighted.sum(axis=1) - np.diag(weighted) + noise_power


# ---------------------------------------------------------------------------
# quality of experience


@dataclass(frozen=True)
class QoeParams:
    """Accuracy-vs-rate trade-off read off the codec quality surface."""

    surface: QualitySurface
    alpha: float = 1.0
    beta: float = 0.3

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ContractViolation("qoe weights must be non-negative")


def qoe(sinr: float, rho_index: int, params: QoeParams) -> float:
    """alpha * accuracy(rho, snr_db) - beta * rho, snr clamped to the surface."""
    rho = params.surface.rho_values[rho_index]
    snr_db = 10.0 * math.log10(max(float(sinr), 1e-30))
    _, acc = surface_lookup(params.surface, rho, snr_db)
    return params.alpha * acc - params.beta * rho


def analytic_quality_surface() -> QualitySurface:
    """Closed-form stand-in for a trained surface, for data-free smoke runs.

    Shape mirrors measured surfaces: accuracy saturates with SNR, saturates
    later but higher as rho grows. Production runs build the surface from
    trained codecs; this one keeps driver tests and demos off the training
    path.
    """
    rhos = COMPRESSION_CODEBOOK
    snrs = (-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)
    acc = np.empty((len(rhos), len(snrs)))
    for i, r in enumerate(rhos):
        for j, s in enumerate(snrs):
            midpoint = -2.0 - 6.0 * r
            ceiling = 0.55 + 0.45 * r ** 0.3
            acc[i, j] = 0.1 + (ceiling - 0.1) / (1.0 + math.exp(-(s - midpoint) / 3.5))
    psnr = 8.0 + 0.6 * (np.arange(len(snrs))[None, :] + 2.0 * np.arange(len(rhos))[:, None])
    return QualitySurface(rhos, snrs, psnr, np.clip(acc, 0.0, 1.0),
                          {"origin": "analytic"})


def best_rho_by_surface(params: QoeParams, snr_db: float) -> int:
    """Exhaustive argmax of the per-rho QoE at one SNR (enumeration oracle)."""
    scores = [params.alpha * surface_lookup(params.surface, r, snr_db)[1]
              - params.beta * r for r in params.surface.rho_values]
    return int(np.argmax(scores))


def cooperative_rewards(qoes: np.ndarray) -> np.ndarray:
    """Own QoE plus half the mean QoE of the other links."""
    q = np.asarray(qoes, dtype=np.float64)
    n = q.shape[0]
    if n == 1:
        return q.copy()
    others_mean = (q.sum() - q) / (n - 1)
    return q + 0.5 * others_mean


# ---------------------------------------------------------------------------
# learning machinery


@dataclass
class RunningNorm:
    """Welford standardizer for observation features."""

    dim: int
    count: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.count < 2:
            return np.zeros_like(x)
        std = np.sqrt(np.maximum(self.m2 / (self.count - 1), 1e-12))
        return (x - self.mean) / std


@dataclass
class ReplayBuffer:
    """Fixed-capacity ring of (s, a, r, s') transitions."""

    capacity: int
    state_dim: int
    size: int = 0
    cursor: int = 0
    s: np.ndarray = None
    a: np.ndarray = None
    r: np.ndarray = None
    s2: np.ndarray = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractViolation("replay capacity must be positive")
        if self.s is None:
            self.s = np.zeros((self.capacity, self.state_dim))
            self.a = np.zeros(self.capacity, dtype=np.int64)
            self.r = np.zeros(self.capacity)
            self.s2 = np.zeros((self.capacity, self.state_dim))

    def __len__(self) -> int:
        return self.size

    def push(self, s, a: int, r: float, s2) -> None:
        i = self.cursor
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: Rng):
        idx = rng.integers(0, self.size, size=batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]


def make_q_net(state_dim: int, n_actions: int, rng: Rng) -> Mlp:
    return init_mlp([state_dim, 64, 64, n_actions], ["relu", "relu", "identity"], rng)


Q_DIVERGENCE_LIMIT = 1e6


def q_update(online: Mlp, target: Mlp, buf: ReplayBuffer, opt: Adam, gamma: float,
             batch: int, rng: Rng) -> float:
    """One Q-learning step on a replay batch; returns the TD loss."""
    s, a, r, s2 = buf.sample(batch, rng)
    q_next = forward(target, s2).max(axis=1)
    desired = forward(online, s)
    desired[np.arange(batch), a] = r + gamma * q_next
    if np.max(np.abs(desired)) > Q_DIVERGENCE_LIMIT:
        raise TrainingFault("Q values diverged")
    loss, grads = backward(online, s, "mse", desired)
    opt.step(online, grads)
    return loss


def eps_greedy(net: Mlp, state: np.ndarray, eps: float, rng: Rng) -> int:
    """Uniform draw consumed every call so action traces replay identically."""
    u = rng.uniform()
    if u < eps:
        return int(rng.integers(0, net.out_width))
    return int(np.argmax(forward(net, state)))


@dataclass
class HierarchicalAgent:
    """One link's two-level learner: frame-scale beam/power, slot-scale rho."""

    large_q: Mlp
    large_target: Mlp
    small_q: Mlp
    small_target: Mlp
    large_buf: ReplayBuffer
    small_buf: ReplayBuffer
    opt_large: Adam
    opt_small: Adam
    norm: RunningNorm
    gamma_large: float = 0.9
    gamma_small: float = 0.5
    large_updates: int = 0
    small_updates: int = 0
    prev_joint: int = 0
    prev_rho: int = 0
    pending_large: tuple | None = None


def make_agent(config: NetworkConfig, rng: Rng, lr: float = 1e-3,
               replay_capacity: int = 10000) -> HierarchicalAgent:
    n_rho = len(config.compression_levels)
    large_dim = 2 + config.n_joint
    small_dim = 2 + n_rho
    large_q = make_q_net(large_dim, config.n_joint, rng)
    small_q = make_q_net(small_dim, n_rho, rng)
    return HierarchicalAgent(
        large_q=large_q, large_target=large_q.copy(),
        small_q=small_q, small_target=small_q.copy(),
        large_buf=ReplayBuffer(replay_capacity, large_dim),
        small_buf=ReplayBuffer(replay_capacity, small_dim),
        opt_large=Adam(large_q, lr=lr), opt_small=Adam(small_q, lr=lr),
        norm=RunningNorm(2),
    )


def sync_targets(agent: HierarchicalAgent, level: str) -> None:
    if level == "large":
        agent.large_target.set_params(agent.large_q.params())
    elif level == "small":
        agent.small_target.set_params(agent.small_q.params())
    else:
        raise ContractViolation(f"unknown level {level!r}")


TARGET_SYNC_EVERY = 200


def agent_update(agent: HierarchicalAgent, level: str, batch: int, rng: Rng) -> None:
    buf = agent.large_buf if level == "large" else agent.small_buf
    if len(buf) < batch:
        return
    if level == "large":
        q_update(agent.large_q, agent.large_target, buf, agent.opt_large,
                 agent.gamma_large, batch, rng)
        agent.large_updates += 1
        if agent.large_updates % TARGET_SYNC_EVERY == 0:
            sync_targets(agent, "large")
    else:
        q_update(agent.small_q, agent.small_target, buf, agent.opt_small,
                 agent.gamma_small, batch, rng)
        agent.small_updates += 1
        if agent.small_updates % TARGET_SYNC_EVERY == 0:
            sync_targets(agent, "small")


# ---------------------------------------------------------------------------
# environment stepping


@dataclass
class SlotOutcome:
    """Physical result of one slot under fixed frame actions."""

    sinr: np.ndarray       # (L,) linear
    qoe: np.ndarray        # (L,)
    rewards: np.ndarray    # (L,) cooperative shaping applied
    gain_db: np.ndarray    # (L,) own equivalent channel gain
    inp_db: np.ndarray     # (L,) interference-plus-noise power
    rho_indices: np.ndarray  # (L,) as acted


def _features_db(state: NetworkState, config: NetworkConfig,
                 beam_vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gains = link_gains(state, beam_vectors)
    p = np.asarray(config.power_levels)[state.powers]
    inp = interference_plus_noise(gains, p, config.noise_power)
    gain_db = 10.0 * np.log10(np.maximum(np.diag(gains), 1e-12))
    inp_db = 10.0 * np.log10(inp)
    return gains, gain_db, inp_db


def step_slot(state: NetworkState, config: NetworkConfig, params: QoeParams,
              rho_indices: np.ndarray, beam_vectors: np.ndarray,
              rng: Rng) -> SlotOutcome:
    """Advance fading one slot and score every link under current actions."""
    innovate(state, config.fading, rng)
    gains, gain_db, inp_db = _features_db(state, config, beam_vectors)
    p = np.asarray(config.power_levels)[state.powers]
    sinr = compute_sinr(gains, p, config.noise_power)
    q = np.array([qoe(sinr[i], int(rho_indices[i]), params)
                  for i in range(config.links)])
    return SlotOutcome(sinr=sinr, qoe=q, rewards=cooperative_rewards(q),
                       gain_db=gain_db, inp_db=inp_db,
                       rho_indices=np.asarray(rho_indices, dtype=np.int64).copy())


def _small_state(agent: HierarchicalAgent, n_rho: int, gain_db: float,
                 inp_db: float) -> np.ndarray:
    s = np.zeros(2 + n_rho)
    s[agent.prev_rho] = 1.0
    s[n_rho:] = agent.norm.normalize(np.array([gain_db, inp_db]))
    return s


def _large_state(agent: HierarchicalAgent, n_joint: int, gain_db: float,
                 inp_db: float, prev_pair: int) -> np.ndarray:
    s = np.zeros(2 + n_joint)
    s[:2] = agent.norm.normalize(np.array([gain_db, inp_db]))
    s[2 + prev_pair] = 1.0
    return s


def step_frame(state: NetworkState, config: NetworkConfig,
               agents: list[HierarchicalAgent], params: QoeParams,
               beam_vectors: np.ndarray, channel_rng: Rng, agent_rng: Rng,
               large_eps: float, small_eps: float, small_frozen: bool,
               learn_small: bool, batch: int = 64,
               small_updates: int = 1) -> tuple[list[SlotOutcome], np.ndarray]:
    """One frame: pick beam/power per link, run the slots, close transitions.

    Returns the slot outcomes and the per-agent mean slot reward (the large
    level's reward). Large transitions are completed at the NEXT frame
    boundary, when the successor decision state is actually observed.
    """
    n_rho = len(config.compression_levels)
    frozen_idx = n_rho // 2

    n_pow = len(config.power_levels)
    _, gain_db, inp_db = _features_db(state, config, beam_vectors)
    large_states = []
    for i, agent in enumerate(agents):
        agent.norm.update(np.array([gain_db[i], inp_db[i]]))
        prev_pair = int(state.beams[i]) * n_pow + int(state.powers[i])
        s_large = _large_state(agent, config.n_joint, gain_db[i], inp_db[i],
                               prev_pair)
        large_states.append(s_large)
        if agent.pending_large is not None:
            s_prev, a_prev, r_prev = agent.pending_large
            agent.large_buf.push(s_prev, a_prev, r_prev, s_large)
            agent.pending_large = None
        joint = eps_greedy(agent.large_q, s_large, large_eps, agent_rng)
        # the beam component is a rotation relative to the current beam, so
        # "hold what works" is one action (delta 0) rather than one per beam;
        # the state still one-hots the absolute pair the last frame used
        delta = joint // n_pow
        state.beams[i] = (state.beams[i] + delta) % config.beam_count
        state.powers[i] = joint % n_pow
        agent.prev_joint = joint

    frame_rewards = np.zeros(config.links)
    outcomes: list[SlotOutcome] = []
    for _ in range(config.frame_slots):
        rho_idx = np.empty(config.links, dtype=np.int64)
        small_states = []
        for i, agent in enumerate(agents):
            s_small = _small_state(agent, n_rho, gain_db[i], inp_db[i])
            small_states.append(s_small)
            if small_frozen:
                rho_idx[i] = frozen_idx
            else:
                rho_idx[i] = eps_greedy(agent.small_q, s_small, small_eps, agent_rng)
        out = step_slot(state, config, params, rho_idx, beam_vectors, channel_rng)
        gain_db, inp_db = out.gain_db, out.inp_db
        for i, agent in enumerate(agents):
            agent.norm.update(np.array([gain_db[i], inp_db[i]]))
            agent.prev_rho = int(rho_idx[i])
            s_next = _small_state(agent, n_rho, gain_db[i], inp_db[i])
            agent.small_buf.push(small_states[i], int(rho_idx[i]),
                                 float(out.rewards[i]), s_next)
            if learn_small:
                for _ in range(small_updates):
                    agent_update(agent, "small", batch, agent_rng)
        frame_rewards += out.rewards
        outcomes.append(out)

    frame_rewards /= config.frame_slots
    for i, agent in enumerate(agents):
        agent.pending_large = (large_states[i], agent.prev_joint,
                               float(frame_rewards[i]))
    return outcomes, frame_rewards


# ---------------------------------------------------------------------------
# training loops and baselines


@dataclass
class OrchestrationTrace:
    """Per-slot log of one run, sufficient to replay the QoE arithmetic."""

    qoe: np.ndarray        # (slots, L)
    rewards: np.ndarray    # (slots, L)
    rho: np.ndarray        # (slots, L) int
    beams: np.ndarray      # (slots, L) int
    powers: np.ndarray     # (slots, L) int
    channel_seed: int
    method: str

    @property
    def mean_qoe(self) -> np.ndarray:
        return self.qoe.mean(axis=1)

    def window_mean(self, first: bool, fraction: float = 0.1) -> float:
        n = max(1, int(round(self.qoe.shape[0] * fraction)))
        block = self.mean_qoe[:n] if first else self.mean_qoe[-n:]
        return float(block.mean())


CHANNEL_STREAM_LABEL = "orchestration.fading"


def _channel_stream(channel_seed: int) -> Rng:
    return named_stream(channel_seed, CHANNEL_STREAM_LABEL)


def _anneal(slot: int, total_slots: int, floor: float = 0.05) -> float:
    half = max(1, total_slots // 2)
    return max(floor, 1.0 - (1.0 - floor) * slot / half)


@dataclass
class TraceRecorder:
    slots: int
    links: int
    cursor: int = 0
    qoe: np.ndarray = None
    rewards: np.ndarray = None
    rho: np.ndarray = None
    beams: np.ndarray = None
    powers: np.ndarray = None

    def __post_init__(self):
        self.qoe = np.zeros((self.slots, self.links))
        self.rewards = np.zeros((self.slots, self.links))
        self.rho = np.zeros((self.slots, self.links), dtype=np.int64)
        self.beams = np.zeros((self.slots, self.links), dtype=np.int64)
        self.powers = np.zeros((self.slots, self.links), dtype=np.int64)

    def record(self, state: NetworkState, out: SlotOutcome) -> None:
        i = self.cursor
        self.qoe[i] = out.qoe
        self.rewards[i] = out.rewards
        self.rho[i] = out.rho_indices
        self.beams[i] = state.beams
        self.powers[i] = state.powers
        self.cursor += 1

    def finish(self, channel_seed: int, method: str) -> OrchestrationTrace:
        n = self.cursor
        return OrchestrationTrace(self.qoe[:n], self.rewards[:n], self.rho[:n],
                                  self.beams[:n], self.powers[:n],
                                  channel_seed, method)


def train_hierarchy(config: NetworkConfig, agents: list[HierarchicalAgent],
                    params: QoeParams, rng: Rng, episodes: int = 1,
                    channel_seed: int | None = None, block_slots: int = 2000,
                    warmup_blocks: int = 1, batch: int = 64,
                    eps_floor: float = 0.05, large_fraction: float = 0.8,
                    large_updates_per_frame: int = 1,
                    small_updates_per_slot: int = 1) -> OrchestrationTrace:
    """Alternating two-timescale Q-learning over whole episodes.

    Each block of slots trains the frame level first (slot level held at the
    mid-codebook rho during warm-up blocks, greedy afterwards), then the slot
    level with the frame level acting greedily; large_fraction sets where
    within a block that handover happens. Exploration anneals linearly to its
    floor over the first half of the run. Fading draws come from a dedicated
    stream recorded in the trace, so a replay from the logged actions
    reproduces the QoE arithmetic exactly.
    """
    if len(agents) != config.links:
        raise ContractViolation("need one agent per link")
    if len(config.compression_levels) != len(params.surface.rho_values):
        raise ContractViolation("compression codebook must match the surface")
    if not 0.0 < large_fraction < 1.0:
        raise ContractViolation("large_fraction must lie strictly inside (0, 1)")
    if channel_seed is None:
        channel_seed = int(rng.integers(0, 2**63 - 1))
    channel_rng = _channel_stream(channel_seed)
    beam_vectors = dft_codebook(config.n_t, config.beam_count)
    total = episodes * config.episode_slots
    rec = TraceRecorder(total, config.links)

    slot = 0
    for _ in range(episodes):
        state = init_network(config, channel_rng)
        for _ in range(config.episode_slots // config.frame_slots):
            block = slot // block_slots
            large_phase = (slot % block_slots) < block_slots * large_fraction
            eps = _anneal(slot, total, eps_floor)
            if large_phase:
                large_eps, small_eps = eps, 0.0
                small_frozen = block < warmup_blocks
                learn_small = False
            else:
                large_eps, small_eps = 0.0, eps
                small_frozen = False
                learn_small = True
            outcomes, _ = step_frame(state, config, agents, params, beam_vectors,
                                     channel_rng, rng, large_eps, small_eps,
                                     small_frozen, learn_small, batch,
                                     small_updates=small_updates_per_slot)
            for out in outcomes:
                rec.record(state, out)
            if large_phase:
                for _ in range(large_updates_per_frame):
                    for agent in agents:
                        agent_update(agent, "large", batch, rng)
            slot += config.frame_slots
    return rec.finish(channel_seed, "hierarchy")


def replay_qoe(config: NetworkConfig, params: QoeParams,
               trace: OrchestrationTrace, episodes: int = 1) -> np.ndarray:
    """Recompute the QoE trace from logged actions and the fading stream."""
    channel_rng = _channel_stream(trace.channel_seed)
    beam_vectors = dft_codebook(config.n_t, config.beam_count)
    out = np.zeros_like(trace.qoe)
    slot = 0
    for _ in range(episodes):
        state = init_network(config, channel_rng)
        for _ in range(config.episode_slots // config.frame_slots):
            for _ in range(config.frame_slots):
                # actions are logged per slot, which also covers policies
                # that re-decide inside a frame
                state.beams[:] = trace.beams[slot]
                state.powers[:] = trace.powers[slot]
                o = step_slot(state, config, params, trace.rho[slot],
                              beam_vectors, channel_rng)
                out[slot] = o.qoe
                slot += 1
    return out


BASELINES = ("random", "fixed", "flat_dqn")


def run_baseline(config: NetworkConfig, params: QoeParams, method: str, rng: Rng,
                 episodes: int = 1, channel_seed: int | None = None,
                 batch: int = 64, lr: float = 1e-3,
                 eps_floor: float = 0.05) -> OrchestrationTrace:
    """Reference policies sharing the exact environment mechanics.

    random redraws beam/power per frame and rho per slot uniformly. fixed
    commits at episode start to max power, the beam with the best own gain
    at that moment, and the mid-codebook rho, then never adapts. flat_dqn
    learns one joint (beam rotation, power, rho) Q-net per link, re-deciding
    every slot with no timescale split.
    """
    if method not in BASELINES:
        raise ContractViolation(f"unknown baseline {method!r}")
    if channel_seed is None:
        channel_seed = int(rng.integers(0, 2**63 - 1))
    channel_rng = _channel_stream(channel_seed)
    beam_vectors = dft_codebook(config.n_t, config.beam_count)
    n_rho = len(config.compression_levels)
    n_flat = config.n_joint * n_rho
    total = episodes * config.episode_slots
    rec = TraceRecorder(total, config.links)

    if method == "flat_dqn":
        dim = 2 + n_flat
        nets = [make_q_net(dim, n_flat, rng) for _ in range(config.links)]
        targets = [n.copy() for n in nets]
        opts = [Adam(n, lr=lr) for n in nets]
        bufs = [ReplayBuffer(10000, dim) for _ in range(config.links)]
        norms = [RunningNorm(2) for _ in range(config.links)]
        prev_flat = [0] * config.links
        updates = [0] * config.links

        def flat_state(i, gain_db, inp_db):
            s = np.zeros(dim)
            s[:2] = norms[i].normalize(np.array([gain_db, inp_db]))
            s[2 + prev_flat[i]] = 1.0
            return s

    slot = 0
    for _ in range(episodes):
        state = init_network(config, channel_rng)
        if method == "flat_dqn":
            prev_states = [None] * config.links
            prev_actions = [0] * config.links
            prev_rewards = [0.0] * config.links
        for frame in range(config.episode_slots // config.frame_slots):
            if method == "random":
                state.beams[:] = rng.integers(0, config.beam_count, config.links)
                state.powers[:] = rng.integers(0, len(config.power_levels),
                                               config.links)
            elif method == "fixed" and frame == 0:
                own = np.stack([
                    np.abs(np.einsum("n,bn->b",
                                     state.h_re[i, i] - 1j * state.h_im[i, i],
                                     beam_vectors)) ** 2
                    for i in range(config.links)])
                state.beams[:] = own.argmax(axis=1)
                state.powers[:] = len(config.power_levels) - 1
            for _ in range(config.frame_slots):
                if method == "random":
                    rho_idx = rng.integers(0, n_rho, config.links)
                elif method == "fixed":
                    rho_idx = np.full(config.links, n_rho // 2, dtype=np.int64)
                else:
                    _, gain_db, inp_db = _features_db(state, config, beam_vectors)
                    rho_idx = np.empty(config.links, dtype=np.int64)
                    eps = _anneal(slot, total, eps_floor)
                    states_now = []
                    for i in range(config.links):
                        norms[i].update(np.array([gain_db[i], inp_db[i]]))
                        s = flat_state(i, gain_db[i], inp_db[i])
                        states_now.append(s)
                        a = eps_greedy(nets[i], s, eps, rng)
                        # same rotation semantics as the hierarchy's frame level
                        delta = a // (len(config.power_levels) * n_rho)
                        state.beams[i] = (state.beams[i] + delta) % config.beam_count
                        rest = a % (len(config.power_levels) * n_rho)
                        state.powers[i] = rest // n_rho
                        rho_idx[i] = rest % n_rho
                        if prev_states[i] is not None:
                            bufs[i].push(prev_states[i], prev_actions[i],
                                         prev_rewards[i], s)
                        prev_states[i], prev_actions[i] = s, a
                        # the state one-hots the absolute triple in effect,
                        # mirroring the hierarchy's previous beam/power pair
                        prev_flat[i] = ((int(state.beams[i]) * len(config.power_levels)
                                         + int(state.powers[i])) * n_rho
                                        + int(rho_idx[i]))
                    del states_now
                out = step_slot(state, config, params, rho_idx, beam_vectors,
                                channel_rng)
                rec.record(state, out)
                if method == "flat_dqn":
                    for i in range(config.links):
                        prev_rewards[i] = float(out.rewards[i])
                        if len(bufs[i]) >= batch:
                            q_update(nets[i], targets[i], bufs[i], opts[i],
                                     0.9, batch, rng)
                            updates[i] += 1
                            if updates[i] % TARGET_SYNC_EVERY == 0:
                                targets[i].set_params(nets[i].params())
                slot += 1
    return rec.finish(channel_seed, method)


def trace_table(trace: OrchestrationTrace) -> MetricsTable:
    """Per-slot CSV rows: QoE per link, mean, and the actions that made them."""
    links = trace.qoe.shape[1]
    header = (["slot"] + [f"qoe_{i}" for i in range(links)] + ["mean_qoe"]
              + [f"beam_{i}" for i in range(links)]
              + [f"power_{i}" for i in range(links)]
              + [f"rho_{i}" for i in range(links)])
    mean_q = trace.mean_qoe
    rows = []
    for t in range(trace.qoe.shape[0]):
        row = ([t] + [float(x) for x in trace.qoe[t]] + [float(mean_q[t])]
               + [int(x) for x in trace.beams[t]]
               + [int(x) for x in trace.powers[t]]
               + [int(x) for x in trace.rho[t]])
        rows.append(tuple(row))
    return MetricsTable(tuple(header), rows)
