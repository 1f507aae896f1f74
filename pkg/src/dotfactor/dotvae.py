"""Split-latent VAE with latent interventions and a latent discriminator.

The encoder maps an image to two diagonal Gaussians, one over the
disentangled code ``c`` (``K`` dims) and one over the entangled code ``z``
(``d`` dims). The decoder maps ``(c, z)`` to Bernoulli logits. The
discriminator sees only ``c``.

Dimension indices ``k`` passed to :func:`intervene` are 1-based, matching
the active set ``{1..m}`` used by the trainer.
"""

import json
import os
import shutil
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .rng import CounterRNG

WEIGHTS_MAGIC = b"DOTW"
FORMAT_VERSION = 1
PROB_EPS = 1e-6
VARIANTS = ("swap", "prior")


@dataclass
class ModelConfig:
    n_pixels: int
    K: int = 10
    d: int = 10
    enc_hidden: tuple = (256, 256)
    dec_hidden: tuple = (256, 256)
    disc_hidden: tuple = (128, 128)
    lam: float = 50.0
    gamma: float = 10.0
    variant: str = "swap"
    cycle_includes_z: bool = False
    logvar_clamp: float = 10.0

    def __post_init__(self):
        self.enc_hidden = tuple(self.enc_hidden)
        self.dec_hidden = tuple(self.dec_hidden)
        self.disc_hidden = tuple(self.disc_hidden)
        if self.K < 1 or self.d < 1:
            raise ValueError("K and d must be >= 1")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


@dataclass
class LatentPosterior:
    mu_c: Tensor
    logvar_c: Tensor
    mu_z: Tensor
    logvar_z: Tensor

    def mean_codes(self):
        return np.concatenate([self.mu_c.data, self.mu_z.data], axis=1)


@dataclass
class InterventionSpec:
    k: int
    t_prime: np.ndarray
    variant: str
    shift: int = None
    rng_state: tuple = field(default=None, repr=False)


# ---- layers ----

class Linear:
    def __init__(self, n_in, n_out, rng, gain=2.0):
        bound = np.sqrt(3.0 * gain / n_in)
        w = (rng.uniform((n_in, n_out)) * 2 - 1) * bound
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros((1, n_out)), requires_grad=True)

    def __call__(self, x, frozen=False):
        if frozen:
            return x @ self.W.detach() + self.b.detach()
        return x @ self.W + self.b

    def params(self):
        return [self.W, self.b]


class MLP:
    """Dense relu stack; the last layer is linear."""

    def __init__(self, sizes, rng):
        self.layers = [
            Linear(a, b, rng.child("layer", i), gain=2.0 if i < len(sizes) - 2 else 1.0)
            for i, (a, b) in enumerate(zip(sizes, sizes[1:]))
        ]

    def __call__(self, x, frozen=False):
        for i, layer in enumerate(self.layers):
            x = layer(x, frozen)
            if i < len(self.layers) - 1:
                x = dc.relu(x)
        return x

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class DOTVAE:
    def __init__(self, config, seed=0):
        self.config = config
        rng = CounterRNG(seed).child("init")
        K, d = config.K, config.d
        self.trunk = MLP((config.n_pixels, *config.enc_hidden), rng.child("trunk"))
        width = config.enc_hidden[-1] if config.enc_hidden else config.n_pixels
        self.head_c = Linear(width, 2 * K, rng.child("head_c"), gain=1.0)
        self.head_z = Linear(width, 2 * d, rng.child("head_z"), gain=1.0)
        self.decoder = MLP((K + d, *config.dec_hidden, config.n_pixels), rng.child("decoder"))
        self.disc = MLP((K, *config.disc_hidden, 1), rng.child("disc"))

    # parameter groups, in checkpoint declaration order
    def named_parameters(self):
        out = []
        for prefix, module in (("trunk", self.trunk), ("decoder", self.decoder), ("disc", self.disc)):
            for i, layer in enumerate(module.layers):
                out += [(f"{prefix}.{i}.W", layer.W), (f"{prefix}.{i}.b", layer.b)]
            if prefix == "trunk":
                out += [("head_c.W", self.head_c.W), ("head_c.b", self.head_c.b),
                        ("head_z.W", self.head_z.W), ("head_z.b", self.head_z.b)]
        return out

    def encoder_params(self):
        return self.trunk.params() + self.head_c.params() + self.head_z.params()

    def decoder_params(self):
        return self.decoder.params()

    def disc_params(self):
        return self.disc.params()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    # ---- forward ----

    def encode(self, x):
        x = dc.as_tensor(x)
        h = x
        if self.trunk.layers:
            h = dc.relu(self.trunk(x))
        K, d, lim = self.config.K, self.config.d, self.config.logvar_clamp
        oc, oz = self.head_c(h), self.head_z(h)
        return LatentPosterior(
            dc.slice_(oc, 0, K, axis=1), dc.clip(dc.slice_(oc, K, 2 * K, axis=1), -lim, lim),
            dc.slice_(oz, 0, d, axis=1), dc.clip(dc.slice_(oz, d, 2 * d, axis=1), -lim, lim),
        )

    def decode(self, c, z):
        return self.decoder(dc.concat([dc.as_tensor(c), dc.as_tensor(z)], axis=1))

    def discriminate(self, c, frozen=False):
        """Probability that ``c`` is an intervened code, clamped to [eps, 1-eps]."""
        logit = self.disc(dc.as_tensor(c), frozen=frozen)
        return dc.clip(dc.sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)

    def encode_means(self, images, batch_size=512):
        """Posterior means ``[N, K + d]`` for flat images, without recording."""
        out = []
        with dc.no_grad():
            for i in range(0, len(images), batch_size):
                chunk = Tensor(images[i:i + batch_size].reshape(len(images[i:i + batch_size]), -1))
                out.append(self.encode(chunk).mean_codes())
        return np.concatenate(out, axis=0)


# ---- loss terms ----

def reparameterize(mu, logvar, noise):
    """``mu + exp(logvar / 2) * noise``; ``noise`` is treated as a constant."""
    return mu + dc.exp(logvar * 0.5) * dc.as_tensor(noise, mu)


def kl_std_normal(mu, logvar):
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I)), shape ``[B]``."""
    return (mu.square() + dc.exp(logvar) - logvar - 1.0).sum(axis=1) * 0.5


def elbo_terms(x, posterior, recon_logits):
    """Batch means of (negative ELBO, reconstruction, KL_z, KL_c) as Tensors."""
    recon = dc.bce_with_logits(recon_logits, dc.as_tensor(x, recon_logits))
    kl_z = kl_std_normal(posterior.mu_z, posterior.logvar_z)
    kl_c = kl_std_normal(posterior.mu_c, posterior.logvar_c)
    loss = (recon + kl_z + kl_c).mean()
    return loss, recon.mean(), kl_z.mean(), kl_c.mean()


def elbo_loss(x, posterior, recon_logits):
    """Negative ELBO averaged over the batch (Bernoulli likelihood)."""
    return elbo_terms(x, posterior, recon_logits)[0]


def _as_rng(seed):
    return seed if isinstance(seed, CounterRNG) else CounterRNG(int(seed))


def intervene(c, k, variant, seed):
    """Replace column ``k`` (1-based) of ``c`` with new values.

    ``swap`` takes each row's value from another row via a cyclic shift by
    ``s`` in ``[1, B - 1]``; ``prior`` draws fresh N(0, 1) values. Returns
    ``(c_prime, InterventionSpec)`` as plain arrays.
    """
    c = np.asarray(c.data if isinstance(c, Tensor) else c)
    B, K = c.shape
    if not 1 <= k <= K:
        raise ValueError(f"k={k} outside [1, {K}]")
    rng = _as_rng(seed)
    state = (rng.key, rng.counter)
    col = k - 1
    shift = None
    if variant == "swap":
        if B < 2:
            raise ValueError("batch-swap intervention needs a batch of at least 2")
        shift = 1 + rng.integers(B - 1)
        t_prime = np.roll(c[:, col], -shift)  # row i takes row (i + shift) mod B
    elif variant == "prior":
        t_prime = rng.normal((B,), dtype=c.dtype)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    c_prime = c.copy()
    c_prime[:, col] = t_prime
    return c_prime, InterventionSpec(k, t_prime.copy(), variant, shift, state)


def latent_cycle_loss(c_prime, z, decode, encode, include_z=False):
    """Mean squared distance between the re-encoded code of ``decode(c', z)`` and ``c'``.

    The generated image is the Bernoulli mean ``sigmoid(logits)``, and the
    re-encoded code is the posterior mean. ``c_prime`` and ``z`` are targets
    (no gradient flows into them).
    """
    c_prime, z = dc.as_tensor(c_prime), dc.as_tensor(z)
    x_hat = dc.sigmoid(decode(c_prime, z))
    post = encode(x_hat)
    loss = (post.mu_c - c_prime).square().sum(axis=1)
    if include_z:
        loss = loss + (post.mu_z - z).square().sum(axis=1)
    return loss.mean()


def disc_loss(model, c_real, c_prime):
    """L_psi = E[log D(c')] + E[log(1 - D(c))], to be maximised by D.

    Inputs are detached so no gradient reaches the encoder.
    """
    p_fake = model.discriminate(dc.as_tensor(c_prime).detach())
    p_real = model.discriminate(dc.as_tensor(c_real).detach())
    return dc.log(p_fake).mean() + dc.log(1.0 - p_real).mean()


def enc_adv_loss(model, c_real):
    """L_phi = E[log(1 - D(c))], minimised by the encoder; D's weights are frozen."""
    return dc.log(1.0 - model.discriminate(c_real, frozen=True)).mean()


def total_loss(elbo, adv, cycle, lam, gamma):
    return elbo + adv * lam + cycle * gamma


# ---- checkpoints ----

def save_checkpoint(model, path, step=0, active_set=(), extra=None):
    """Write ``model.json`` + ``weights.bin`` via a temp dir and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    old = path.with_name(path.name + ".old")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    named = model.named_parameters()
    total = sum(p.data.size for _, p in named)
    blob = [WEIGHTS_MAGIC, struct.pack("<IQ", FORMAT_VERSION, total)]
    blob += [np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in named]
    meta = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "layers": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "step": int(step),
        "active_set": [int(k) for k in active_set],
    }
    if extra:
        meta.update(extra)
    for name, data in (("weights.bin", b"".join(blob)),
                       ("model.json", (json.dumps(meta, indent=2) + "\n").encode())):
        with open(tmp / name, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
    shutil.rmtree(old, ignore_errors=True)
    if path.exists():
        os.replace(path, old)
    os.replace(tmp, path)
    shutil.rmtree(old, ignore_errors=True)
    return path


def load_checkpoint(path):
    """Return ``(model, meta)``; falls back to ``<path>.old`` after an interrupted swap."""
    path = Path(path)
    if not (path / "model.json").exists():
        old = path.with_name(path.name + ".old")
        if (old / "model.json").exists():
            path = old
        else:
            raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads((path / "model.json").read_text())
    cfg = dict(meta["config"])
    model = DOTVAE(ModelConfig(**cfg), seed=0)
    raw = (path / "weights.bin").read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ValueError("weights.bin: bad magic")
    version, total = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"weights.bin: unsupported version {version}")
    flat = np.frombuffer(raw, dtype="<f4", offset=16)
    if flat.size != total:
        raise ValueError("weights.bin: element count mismatch")
    named = model.named_parameters()
    if [list(p.shape) for _, p in named] != [layer["shape"] for layer in meta["layers"]]:
        raise ValueError("model.json layer shapes do not match the config")
    offset = 0
    for _, p in named:
        n = p.data.size
        p.data = flat[offset:offset + n].reshape(p.shape).astype(np.float32)
        offset += n
    return model, meta
