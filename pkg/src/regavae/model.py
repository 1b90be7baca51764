"""Tiny transformer VAE with per-layer latent injection.

The encoder is a bidirectional transformer whose mean-pooled output feeds one
posterior head per decoder layer, giving a diagonal Gaussian latent for each
layer. The decoder is causal; at every layer the hidden states are fused with
that layer's latent through a rank-r product of linear maps combined
elementwise, which keeps the decoder dependent on the latent and counteracts
posterior collapse.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, InputError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
# Upper clamp bound used when flooring the KL term (free bits); effectively
# +inf for any reachable KL while keeping the op on finite values.
_KL_CEIL = 1e30


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_h: int = 128
    n_heads: int = 4
    d_z: int = 32
    r_rank: int = 4
    d_ff: int = 0  # 0 means 4*d_h
    max_seq_len: int = 128
    bos_id: int = 2
    eos_id: int = 3

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_h
        if self.d_h % self.n_heads != 0:
            raise ConfigError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if self.r_rank < 1:
            raise ConfigError(f"r_rank must be >= 1, got {self.r_rank}")
        if self.d_z < 1:
            raise ConfigError(f"d_z must be >= 1, got {self.d_z}")


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over the latent space."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape or self.mean.ndim != 1:
            raise ContractError(
                f"mean/log_var must be equal-length vectors, got {self.mean.shape} vs {self.log_var.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def mean_array(self) -> np.ndarray:
        return self.mean.data

    @property
    def log_var_array(self) -> np.ndarray:
        return self.log_var.data

    @staticmethod
    def from_arrays(mean: np.ndarray, log_var: np.ndarray) -> "LatentGaussian":
        return LatentGaussian(Tensor(np.asarray(mean, dtype=np.float64)),
                              Tensor(np.asarray(log_var, dtype=np.float64)))


@dataclass
class ElboBreakdown:
    """Per-batch training signal: reconstruction NLL, KL, annealing weight."""

    recon_nll: float
    kl: float
    beta: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.recon_nll + self.beta * self.kl


def reparameterize(g: LatentGaussian, rng: np.random.Generator) -> Tensor:
    """z = mean + exp(0.5 * log_var) * eps with eps ~ N(0, I)."""
    eps = ag.random_normal(g.mean.shape, rng)
    std = ag.exp(g.log_var * 0.5)
    return g.mean + std * eps


def gaussian_kl_standard(g: LatentGaussian) -> Tensor:
    """Closed-form KL(g || N(0, I)) as a differentiable scalar, in nats."""
    var = ag.exp(g.log_var)
    terms = var + g.mean * g.mean - 1.0 - g.log_var
    return ag.tensor_sum(terms) * 0.5


class VaeModel:
    """Encoder/decoder VAE over token sequences. Parameters live in a flat dict."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config

        def par(name, arr):
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        def normal(shape, scale=0.02):
            return rng.standard_normal(shape) * scale

        par("tok_emb", normal((c.vocab_size, c.d_h)))
        par("pos_emb", normal((c.max_seq_len + 1, c.d_h)))
        for stack in ("enc", "dec"):
            for l in range(c.n_layers):
                p = f"{stack}.{l}"
                for w in ("wq", "wk", "wv", "wo"):
                    par(f"{p}.attn.{w}", normal((c.d_h, c.d_h)))
                    par(f"{p}.attn.{w}_b", np.zeros(c.d_h))
                par(f"{p}.ln1.g", np.ones(c.d_h))
                par(f"{p}.ln1.b", np.zeros(c.d_h))
                par(f"{p}.ff.w1", normal((c.d_ff, c.d_h)))
                par(f"{p}.ff.b1", np.zeros(c.d_ff))
                par(f"{p}.ff.w2", normal((c.d_h, c.d_ff)))
                par(f"{p}.ff.b2", np.zeros(c.d_h))
                par(f"{p}.ln2.g", np.ones(c.d_h))
                par(f"{p}.ln2.b", np.zeros(c.d_h))
            par(f"{stack}.lnf.g", np.ones(c.d_h))
            par(f"{stack}.lnf.b", np.zeros(c.d_h))
        for l in range(c.n_layers):
            # Posterior heads start with unit variance (log-variance exactly
            # 0) and input-dependent means at O(0.3) scale. A zero mean head
            # leaves the latent with no input signal, and the decoder gate can
            # absorb any rescaling of the latent, so training largely
            # preserves whatever mean scale initialization sets; a deliberate
            # O(0.3) seed keeps the posterior means at a measurable magnitude
            # instead of degenerating to an arbitrarily tiny encoding.
            par(f"post.{l}.w_mu", 0.3 * rng.standard_normal((c.d_z, c.d_h)))
            par(f"post.{l}.b_mu", np.zeros(c.d_z))
            par(f"post.{l}.w_lv", np.zeros((c.d_z, c.d_h)))
            par(f"post.{l}.b_lv", np.zeros(c.d_z))
            for j in range(c.r_rank):
                # W_v near identity/r so the rank sum starts close to identity;
                # W_z unit-variance so the elementwise gate has O(1) scale and
                # the decoder feels the latent from step one (the annealing
                # warmup lets posterior variances shrink before the KL weight
                # bites, so the O(1) gate does not stay noisy for long).
                par(f"inj.{l}.{j}.w_v", np.eye(c.d_h) / c.r_rank + normal((c.d_h, c.d_h)))
                par(f"inj.{l}.{j}.w_z", rng.standard_normal((c.d_h, c.d_z)) / np.sqrt(c.d_z))

    # -- transformer pieces --------------------------------------------------

    def _embed(self, ids: list[int]) -> Tensor:
        pos = np.arange(len(ids))
        return ag.embedding_lookup(self.params["tok_emb"], ids) + ag.embedding_lookup(
            self.params["pos_emb"], pos
        )

    def _attention(self, h: Tensor, prefix: str, causal: bool) -> Tensor:
        c = self.config
        p = self.params
        n = h.shape[0]
        dk = c.d_h // c.n_heads
        q = h @ ag.transpose(p[f"{prefix}.attn.wq"]) + p[f"{prefix}.attn.wq_b"]
        k = h @ ag.transpose(p[f"{prefix}.attn.wk"]) + p[f"{prefix}.attn.wk_b"]
        v = h @ ag.transpose(p[f"{prefix}.attn.wv"]) + p[f"{prefix}.attn.wv_b"]
        mask = None
        if causal:
            mask = Tensor(np.triu(np.full((n, n), -1e9), k=1))
        heads = []
        for i in range(c.n_heads):
            qh = ag.slice_cols(q, i * dk, (i + 1) * dk)
            kh = ag.slice_cols(k, i * dk, (i + 1) * dk)
            vh = ag.slice_cols(v, i * dk, (i + 1) * dk)
            scores = (qh @ ag.transpose(kh)) * (1.0 / np.sqrt(dk))
            if mask is not None:
                scores = scores + mask
            heads.append(ag.softmax(scores, axis=-1) @ vh)
        o = ag.concat(heads, axis=-1)
        return o @ ag.transpose(p[f"{prefix}.attn.wo"]) + p[f"{prefix}.attn.wo_b"]

    def _ff(self, h: Tensor, prefix: str) -> Tensor:
        p = self.params
        u = ag.gelu(h @ ag.transpose(p[f"{prefix}.ff.w1"]) + p[f"{prefix}.ff.b1"])
        return u @ ag.transpose(p[f"{prefix}.ff.w2"]) + p[f"{prefix}.ff.b2"]

    def _block(self, h: Tensor, prefix: str, causal: bool) -> Tensor:
        p = self.params
        h = h + self._attention(
            ag.layer_norm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"]), prefix, causal
        )
        h = h + self._ff(ag.layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"]), prefix)
        return h

    def _prepare_ids(self, tokens: list[int], name: str) -> list[int]:
        if len(tokens) == 0:
            raise InputError(f"empty token sequence for {name}")
        limit = self.config.max_seq_len - 2  # room for bos/eos
        if len(tokens) > limit:
            warnings.warn(f"{name} truncated from {len(tokens)} to {limit} tokens")
            tokens = tokens[:limit]
        return tokens

    # -- VAE operations ------------------------------------------------------

    def encode(self, tokens: list[int]) -> list[LatentGaussian]:
        """Per-decoder-layer diagonal posteriors from the pooled encoder state."""
        c = self.config
        p = self.params
        tokens = self._prepare_ids(tokens, "encoder input")
        ids = [c.bos_id] + list(tokens) + [c.eos_id]
        h = self._embed(ids)
        for l in range(c.n_layers):
            h = self._block(h, f"enc.{l}", causal=False)
        h = ag.layer_norm(h, p["enc.lnf.g"], p["enc.lnf.b"])
        pooled = ag.tensor_mean(h, axis=0)
        posts = []
        for l in range(c.n_layers):
            mu = pooled @ ag.transpose(p[f"post.{l}.w_mu"]) + p[f"post.{l}.b_mu"]
            lv = pooled @ ag.transpose(p[f"post.{l}.w_lv"]) + p[f"post.{l}.b_lv"]
            posts.append(LatentGaussian(mu, ag.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)))
        return posts

    def inject_latent(self, v: Tensor, z: Tensor, layer: int) -> Tensor:
        """Rank-r fusion: (sum_j W_v v_i) elementwise-times (sum_j W_z z)."""
        c = self.config
        if not 0 <= layer < c.n_layers:
            raise ContractError(f"layer {layer} out of range for {c.n_layers} layers")
        p = self.params
        hid = None
        gate = None
        for j in range(c.r_rank):
            hv = v @ ag.transpose(p[f"inj.{layer}.{j}.w_v"])
            gz = p[f"inj.{layer}.{j}.w_z"] @ z
            hid = hv if hid is None else hid + hv
            gate = gz if gate is None else gate + gz
        return hid * gate

    def decode(self, z_layers: list[Tensor], target_tokens: list[int]) -> tuple[Tensor, Tensor]:
        """Teacher-forced causal decode; returns (logits, mean NLL in nats)."""
        c = self.config
        if len(z_layers) != c.n_layers:
            raise ContractError(f"expected {c.n_layers} latents, got {len(z_layers)}")
        tokens = self._prepare_ids(list(target_tokens), "decoder target")
        inputs = [c.bos_id] + tokens
        targets = tokens + [c.eos_id]
        h = self._embed(inputs)
        for l in range(c.n_layers):
            # Residual fusion keeps the token signal intact when z is noisy.
            h = h + self.inject_latent(h, z_layers[l], l)
            h = self._block(h, f"dec.{l}", causal=True)
        h = ag.layer_norm(h, self.params["dec.lnf.g"], self.params["dec.lnf.b"])
        logits = h @ ag.transpose(self.params["tok_emb"])
        nll = ag.cross_entropy_with_logits(logits, targets)
        return logits, nll

    def elbo_step(self, x_tokens: list[int], y_tokens: list[int], beta: float,
                  rng: np.random.Generator,
                  kl_floor: float = 0.0) -> tuple[ElboBreakdown, Tensor]:
        """Plain-VAE objective: reconstruction NLL plus beta-weighted KL to N(0,I).

        kl_floor > 0 enables free bits: the KL term is floored at kl_floor
        nats, so gradients stop pushing the posterior toward the prior once
        its KL is below the floor. This reserves a latent information budget
        and is the standard mitigation when annealing alone cannot prevent
        posterior collapse. The reported breakdown always carries the true KL.
        """
        posts = self.encode(x_tokens)
        z_layers = [reparameterize(g, rng) for g in posts]
        _, nll = self.decode(z_layers, y_tokens)
        kl = None
        for g in posts:
            k = gaussian_kl_standard(g)
            kl = k if kl is None else kl + k
        kl_term = ag.clamp(kl, kl_floor, _KL_CEIL) if kl_floor > 0.0 else kl
        total = nll + beta * kl_term
        return ElboBreakdown(nll.item(), kl.item(), beta), total

    def generate(self, z_layers: list[Tensor], max_len: int, strategy: str = "greedy",
                 rng: np.random.Generator | None = None, top_k: int = 10) -> list[int]:
        """Autoregressive decoding until EOS or max_len tokens."""
        c = self.config
        if len(z_layers) != c.n_layers:
            raise ContractError(f"expected {c.n_layers} latents, got {len(z_layers)}")
        if strategy not in ("greedy", "top_k"):
            raise ContractError(f"unknown decoding strategy {strategy!r}")
        out: list[int] = []
        for _ in range(max_len):
            inputs = [c.bos_id] + out
            if len(inputs) > c.max_seq_len:
                break
            h = self._embed(inputs)
            for l in range(c.n_layers):
                h = h + self.inject_latent(h, z_layers[l], l)
                h = self._block(h, f"dec.{l}", causal=True)
            h = ag.layer_norm(h, self.params["dec.lnf.g"], self.params["dec.lnf.b"])
            logits = (h @ ag.transpose(self.params["tok_emb"])).data[-1]
            if strategy == "greedy":
                nxt = int(np.argmax(logits))
            else:
                if rng is None:
                    raise ContractError("top_k sampling requires an rng")
                k = min(top_k, logits.size)
                cand = np.argsort(-logits, kind="stable")[:k]
                probs = np.exp(logits[cand] - logits[cand].max())
                probs /= probs.sum()
                nxt = int(rng.choice(cand, p=probs))
            if nxt == c.eos_id:
                break
            out.append(nxt)
        return out
