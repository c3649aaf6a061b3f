"""Learned proposal network for guided importance sampling.

One shared core serves every model: the observation is flattened and embedded
once per trace, then an LSTM consumes, at each controlled latent site, the
concatenation of [observation embedding | address embedding | embedding of the
previously sampled value], and a per-site head maps the hidden state to a
proposal distribution.

Heads exist for two prior families: Categorical priors get a softmax head over
the same class count, and bounded continuous priors (Uniform, TruncatedNormal,
mixtures of truncated normals) get a mixture-of-truncated-normals head whose
component means and widths are squashed into the prior's support interval, so
the proposal can never escape it.  Sites whose priors are unbounded (Normal,
Poisson) and sites never seen in training fall back to sampling from the
prior, leaving the core state untouched.

Network files ("PXN"): magic ``0x50 0x58 0x4E``, version 1, a JSON header
(architecture dimensions, observation length, site registry), then every
parameter as (name, rank/dims/f64 row-major data).  Loading restores
parameters bit for bit, so a reloaded network proposes identically.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from ..distributions import (
    Categorical,
    Distribution,
    MixtureTruncatedNormal,
    Normal,
    Poisson,
    TruncatedNormal,
    Uniform,
)
from ..protocol import _Reader, _Writer
from ..values import Boolean, Integer, Real, RealVector, Value
from .autodiff import (
    Tensor,
    log,
    log_sum_exp,
    narrow,
    no_grad,
    normal_cdf,
    sigmoid,
    softplus,
)
from .layers import LstmCell, Mlp, Linear, concat_rows, row, xavier_uniform

NETWORK_MAGIC = b"\x50\x58\x4e"
NETWORK_FILE_VERSION = 1

_STD_FLOOR_FRACTION = 1e-3  # minimum proposal std, as a fraction of the support width
_LOG_2PI = 1.8378770664093453


class NetworkFileError(ValueError):
    """A proposal-network file is malformed or inconsistent."""


@dataclass(frozen=True)
class NetworkConfig:
    obs_embed_dim: int = 64
    obs_hidden_dim: int = 64
    addr_embed_dim: int = 16
    sample_embed_dim: int = 4
    hidden_dim: int = 64
    head_hidden_dim: int = 32
    mixture_components: int = 5


@dataclass(frozen=True)
class SiteSpec:
    address: str
    instance: int
    head: str  # "categorical" or "mixture"
    value_dim: int
    classes: int | None = None  # class count for categorical heads


def value_to_vector(v: Value) -> np.ndarray:
    """Flatten any protocol value to a float64 vector."""
    if isinstance(v, Real):
        return np.array([v.x])
    if isinstance(v, Integer):
        return np.array([float(v.i)])
    if isinstance(v, Boolean):
        return np.array([1.0 if v.b else 0.0])
    if isinstance(v, RealVector):
        return np.asarray(v.array, dtype=np.float64).ravel()
    raise TypeError(f"not a value: {type(v).__name__}")


def head_kind_for(dist: Distribution) -> str | None:
    """Which head family serves a site with this prior; None means fall back
    to the prior itself."""
    if isinstance(dist, Categorical):
        return "categorical"
    if isinstance(dist, (Uniform, TruncatedNormal, MixtureTruncatedNormal)):
        return "mixture"
    if isinstance(dist, (Normal, Poisson)):
        return None
    return None


class _Site:
    """Registered per-address parameters: embedding, value embedder, head."""

    __slots__ = ("spec", "serial", "addr_embed", "smp_embed", "head")

    def __init__(self, spec: SiteSpec, serial: int, config: NetworkConfig, rng):
        self.spec = spec
        self.serial = serial
        prefix = f"site{serial}"
        self.addr_embed = Tensor(
            xavier_uniform(rng, 1, config.addr_embed_dim), requires_grad=True
        )
        self.smp_embed = Linear(
            spec.value_dim, config.sample_embed_dim, rng, f"{prefix}.smp"
        )
        if spec.head == "categorical":
            out_dim = spec.classes
        else:
            out_dim = 3 * config.mixture_components
        self.head = Mlp(
            config.hidden_dim, config.head_hidden_dim, out_dim, rng, f"{prefix}.head"
        )

    def parameters(self):
        return (
            [(f"site{self.serial}.addr", self.addr_embed)]
            + self.smp_embed.parameters()
            + self.head.parameters()
        )

    def compatible(self, dist: Distribution) -> bool:
        kind = head_kind_for(dist)
        if kind != self.spec.head:
            return False
        if kind == "categorical":
            return len(dist.probs) == self.spec.classes
        support = dist.support()
        return bool(getattr(support, "bounded", False)) and hasattr(support, "low")


class ProposalNetwork:
    """Amortized proposal over every controlled latent site of a model."""

    def __init__(self, obs_dim: int, config: NetworkConfig | None = None, seed: int = 0):
        if obs_dim < 1:
            raise ValueError(f"obs_dim must be >= 1, got {obs_dim}")
        self.obs_dim = obs_dim
        self.config = config or NetworkConfig()
        self._rng = np.random.Generator(np.random.PCG64(seed))
        c = self.config
        self.obs_mlp = Mlp(obs_dim, c.obs_hidden_dim, c.obs_embed_dim, self._rng, "obs")
        core_in = c.obs_embed_dim + c.addr_embed_dim + c.sample_embed_dim
        self.core = LstmCell(core_in, c.hidden_dim, self._rng, "core")
        self.initial_sample_embed = Tensor(
            xavier_uniform(self._rng, 1, c.sample_embed_dim), requires_grad=True
        )
        self.sites: dict[tuple[str, int], _Site] = {}
        self._site_order: list[tuple[str, int]] = []

    # --- registry ---------------------------------------------------------

    def site_for(self, address: str, instance: int) -> _Site | None:
        return self.sites.get((address, instance))

    def register_site(
        self, address: str, instance: int, dist: Distribution, value: Value
    ) -> _Site | None:
        """Create parameters for a newly seen site; None if its prior family
        has no head (the site will always fall back to the prior)."""
        key = (address, instance)
        existing = self.sites.get(key)
        if existing is not None:
            return existing
        kind = head_kind_for(dist)
        if kind is None:
            return None
        classes = len(dist.probs) if kind == "categorical" else None
        spec = SiteSpec(address, instance, kind, len(value_to_vector(value)), classes)
        return self._install(spec)

    def _install(self, spec: SiteSpec) -> _Site:
        key = (spec.address, spec.instance)
        site = _Site(spec, len(self._site_order), self.config, self._rng)
        self.sites[key] = site
        self._site_order.append(key)
        return site

    def parameters(self):
        """All parameters as ordered (name, Tensor) pairs."""
        out = self.obs_mlp.parameters() + self.core.parameters()
        out.append(("initial_sample_embed", self.initial_sample_embed))
        for key in self._site_order:
            out.extend(self.sites[key].parameters())
        return out

    # --- forward pieces (shared by training and inference) ----------------

    def embed_observation(self, obs_vec: np.ndarray) -> Tensor:
        if obs_vec.shape != (self.obs_dim,):
            raise ValueError(
                f"observation has {obs_vec.shape} values, network expects {self.obs_dim}"
            )
        return self.obs_mlp(row(obs_vec))

    def step_core(self, obs_embed: Tensor, site: _Site, prev_embed: Tensor, state):
        x = concat_rows([obs_embed, site.addr_embed, prev_embed])
        return self.core(x, state)

    def embed_value(self, site: _Site, value: Value) -> Tensor:
        vec = value_to_vector(value)
        if len(vec) != site.spec.value_dim:
            raise ValueError(
                f"value at {site.spec.address} has {len(vec)} components, "
                f"site expects {site.spec.value_dim}"
            )
        return site.smp_embed(row(vec))

    def head_log_prob(self, site: _Site, h: Tensor, dist: Distribution, value: Value):
        """Differentiable log q(value) of the site head; the loss term."""
        if site.spec.head == "categorical":
            logits = site.head(h)
            k = int(value_to_float_index(value))
            if not 0 <= k < site.spec.classes:
                raise ValueError(f"class {k} outside head of {site.spec.classes}")
            return narrow(logits, k, 1) - log_sum_exp(logits)
        return self._mixture_log_prob(site, h, dist, float(value_to_vector(value)[0]))

    def _mixture_params(self, site: _Site, h: Tensor, dist: Distribution):
        support = dist.support()
        low, high = float(support.low), float(support.high)
        width = high - low
        k = self.config.mixture_components
        out = site.head(h)
        logits = narrow(out, 0, k)
        means = low + sigmoid(narrow(out, k, k)) * width
        stds = softplus(narrow(out, 2 * k, k)) * width + _STD_FLOOR_FRACTION * width
        return logits, means, stds, low, high

    def _mixture_log_prob(self, site: _Site, h: Tensor, dist: Distribution, v: float):
        logits, means, stds, low, high = self._mixture_params(site, h, dist)
        z = (v - means) / stds
        alpha = (low - means) / stds
        beta = (high - means) / stds
        # Truncated-normal component densities; the tiny epsilon guards the
        # log when both CDF tails coincide numerically.
        log_norm = log(normal_cdf(beta) - normal_cdf(alpha) + 1e-38)
        log_comp = (-0.5) * z * z - log(stds) - 0.5 * _LOG_2PI - log_norm
        log_w = logits - log_sum_exp(logits)
        return log_sum_exp(log_w + log_comp)

    def propose(
        self, site: _Site, h: Tensor, dist: Distribution
    ) -> Distribution:
        """Concrete proposal distribution from a hidden state (no gradients)."""
        with no_grad():
            if site.spec.head == "categorical":
                logits = site.head(h).data.ravel()
                shifted = np.exp(logits - logits.max())
                probs = shifted / shifted.sum()
                return Categorical(tuple(float(p) for p in probs))
            logits, means, stds, low, high = self._mixture_params(site, h, dist)
            w = np.exp(logits.data.ravel() - logits.data.max())
            w = w / w.sum()
            comps = tuple(
                TruncatedNormal(float(m), float(s), low, high)
                for m, s in zip(means.data.ravel(), stds.data.ravel())
            )
            return MixtureTruncatedNormal(tuple(float(x) for x in w), comps)

    # --- per-trace session -------------------------------------------------

    def session(self, observation: Value | None) -> "GuidedSession":
        """Start one guided trace against a fixed observation.

        ``None`` embeds a zero vector, for models driven purely by conditions.
        """
        if observation is None:
            obs_vec = np.zeros(self.obs_dim)
        else:
            obs_vec = value_to_vector(observation)
        with no_grad():
            obs_embed = self.embed_observation(obs_vec)
        return GuidedSession(self, obs_embed)

    # --- persistence -------------------------------------------------------

    def save(self, path) -> None:
        w = _Writer()
        w.buf += NETWORK_MAGIC
        w.u8(NETWORK_FILE_VERSION)
        header = {
            "config": asdict(self.config),
            "obs_dim": self.obs_dim,
            "sites": [
                {
                    "address": s.address,
                    "instance": s.instance,
                    "head": s.head,
                    "value_dim": s.value_dim,
                    "classes": s.classes,
                }
                for s in (self.sites[k].spec for k in self._site_order)
            ],
        }
        w.string(json.dumps(header, sort_keys=True))
        params = self.parameters()
        w.u32(len(params))
        for name, tensor in params:
            w.string(name)
            w.vector(np.ascontiguousarray(tensor.data))
        with open(path, "wb") as fh:
            fh.write(bytes(w.buf))

    @classmethod
    def load(cls, path) -> "ProposalNetwork":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 4 or data[:3] != NETWORK_MAGIC:
            raise NetworkFileError("not a proposal-network file (bad magic)")
        if data[3] != NETWORK_FILE_VERSION:
            raise NetworkFileError(f"unsupported network file version {data[3]}")
        r = _Reader(data)
        r.pos = 4
        try:
            header = json.loads(r.string())
            net = cls(header["obs_dim"], NetworkConfig(**header["config"]))
            for s in header["sites"]:
                net._install(
                    SiteSpec(
                        s["address"], s["instance"], s["head"], s["value_dim"],
                        s["classes"],
                    )
                )
            count = r.u32()
            params = dict(net.parameters())
            if count != len(params):
                raise NetworkFileError(
                    f"file stores {count} parameters, architecture has {len(params)}"
                )
            for _ in range(count):
                name = r.string()
                arr = r.vector()
                tensor = params.get(name)
                if tensor is None:
                    raise NetworkFileError(f"unknown parameter {name!r}")
                if arr.shape != tensor.data.shape:
                    raise NetworkFileError(
                        f"parameter {name!r} has shape {arr.shape}, "
                        f"expected {tensor.data.shape}"
                    )
                tensor.data = arr
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, NetworkFileError):
                raise
            raise NetworkFileError(f"malformed network file: {e}") from e
        if r.pos != len(data):
            raise NetworkFileError(f"{len(data) - r.pos} trailing bytes")
        return net


def value_to_float_index(value: Value) -> int:
    if isinstance(value, Integer):
        return value.i
    if isinstance(value, Boolean):
        return int(value.b)
    raise TypeError(f"categorical head needs an index value, got {type(value).__name__}")


class GuidedSession:
    """Incremental core state for one guided trace.

    ``proposal_for`` looks the site up, advances the LSTM, and returns a
    proposal distribution -- or None (prior fallback) for unknown or
    incompatible sites, in which case the core state is left untouched.
    ``advance`` then feeds back the value actually sampled.
    """

    def __init__(self, network: ProposalNetwork, obs_embed: Tensor):
        self.network = network
        self.obs_embed = obs_embed
        self.state = network.core.initial_state()
        self.prev_embed = Tensor(network.initial_sample_embed.data)
        self.hidden: Tensor | None = None

    def proposal_for(
        self, address: str, instance: int, dist: Distribution
    ) -> Distribution | None:
        site = self.network.site_for(address, instance)
        if site is None or not site.compatible(dist):
            return None
        with no_grad():
            h, c = self.network.step_core(
                self.obs_embed, site, self.prev_embed, self.state
            )
            self.state = (h, c)
            self.hidden = h
            return self.network.propose(site, h, dist)

    def advance(
        self, address: str, instance: int, dist: Distribution, value: Value
    ) -> None:
        site = self.network.site_for(address, instance)
        if site is None:
            return
        with no_grad():
            self.prev_embed = self.network.embed_value(site, value)


class PriorNetwork:
    """Degenerate stand-in whose sessions always fall back to the prior."""

    def session(self, observation: Value | None) -> "PriorSession":
        return PriorSession()


class PriorSession:
    def proposal_for(self, address, instance, dist):
        return None

    def advance(self, address, instance, dist, value):
        return None
