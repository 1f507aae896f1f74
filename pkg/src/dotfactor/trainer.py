"""Two-step (wake/sleep) training loop with a one-factor-at-a-time schedule.

Per batch:

1. wake: encoder + decoder step on ``-ELBO + lam * L_phi``;
2. sleep (after warm-up, if ``gamma > 0``): draw ``k`` uniformly from the
   active set ``{1..m}``, intervene on ``c_k``, step decoder (and encoder,
   unless ``sleep_decoder_only``) on ``gamma * L_theta``;
3. discriminator: step D on ``-L_psi`` with freshly encoded ``c`` and ``c'``.

Random draws come from named sub-streams of one :class:`CounterRNG`
(``shuffle/epoch``, ``wake/epoch/batch``, ``sleep/epoch/batch``,
``disc/epoch/batch``), so skipping a sub-step never shifts another's noise.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .dotvae import (
    DOTVAE,
    ModelConfig,
    disc_loss,
    elbo_terms,
    enc_adv_loss,
    intervene,
    latent_cycle_loss,
    reparameterize,
    save_checkpoint,
)
from .rng import CounterRNG

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_elbo", "loss_cycle", "loss_adv_enc", "loss_disc", "kl_z", "kl_c",
               "active_set")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    disc_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: float = 5
    sat_window: int = 5
    sat_threshold: float = 0.005
    kl_stop: float = 0.1
    seed: int = 0
    lam: float = 50.0
    gamma: float = 10.0
    variant: str = "swap"
    K: int = 10
    d: int = 10
    desired_factors: int = None
    enc_hidden: tuple = (256, 256)
    dec_hidden: tuple = (256, 256)
    disc_hidden: tuple = (128, 128)
    sleep_decoder_only: bool = False
    cycle_includes_z: bool = False
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.sat_threshold <= 0:
            raise ValueError("sat_threshold must be > 0")
        if self.kl_stop < 0:
            raise ValueError("kl_stop must be >= 0")
        if self.sat_window < 1 or self.epochs < 1 or self.batch_size < 2:
            raise ValueError("sat_window, epochs must be >= 1 and batch_size >= 2")
        self.enc_hidden = tuple(self.enc_hidden)
        self.dec_hidden = tuple(self.dec_hidden)
        self.disc_hidden = tuple(self.disc_hidden)

    def model_config(self, n_pixels):
        return ModelConfig(n_pixels=n_pixels, K=self.K, d=self.d, enc_hidden=self.enc_hidden,
                           dec_hidden=self.dec_hidden, disc_hidden=self.disc_hidden,
                           lam=self.lam, gamma=self.gamma, variant=self.variant,
                           cycle_includes_z=self.cycle_includes_z)

    def to_json(self):
        out = asdict(self)
        if math.isinf(out["warmup_epochs"]):
            out["warmup_epochs"] = "inf"
        return out

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        obj = dict(obj)
        if obj.get("warmup_epochs") in ("inf", "Infinity"):
            obj["warmup_epochs"] = math.inf
        return cls(**obj)


@dataclass
class ScheduleState:
    m: int = 1
    history: list = field(default_factory=list)
    last_growth: int = None
    stopped: bool = False
    stop_reason: str = None

    @property
    def active_set(self):
        return tuple(range(1, self.m + 1))


@dataclass
class Optimizers:
    enc: dc.Adam
    dec: dc.Adam
    disc: dc.Adam

    @classmethod
    def for_model(cls, model, config):
        hyper = dict(beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        return cls(dc.Adam(model.encoder_params(), lr=config.lr, **hyper),
                   dc.Adam(model.decoder_params(), lr=config.lr, **hyper),
                   dc.Adam(model.disc_params(), lr=config.disc_lr, **hyper))


def interventions_active(config, epoch):
    return epoch >= config.warmup_epochs


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def wake_step(model, opts, x, config, rng):
    """Encoder + decoder update on the ELBO (+ adversarial term); returns float stats."""
    K = model.config.K
    post = model.encode(x)
    noise = rng.normal((x.shape[0], K + model.config.d))
    c = reparameterize(post.mu_c, post.logvar_c, noise[:, :K])
    z = reparameterize(post.mu_z, post.logvar_z, noise[:, K:])
    elbo, _, kl_z, kl_c = elbo_terms(x, post, model.decode(c, z))
    loss, adv_value = elbo, 0.0
    if config.lam > 0:
        adv = enc_adv_loss(model, c)
        adv_value = adv.item()
        loss = loss + adv * config.lam
    dc.backward(loss)
    opts.enc.step()
    opts.dec.step()
    model.zero_grad()
    return dict(elbo=elbo.item(), kl_z=kl_z.item(), kl_c=kl_c.item(), adv=adv_value), c.data, z.data


def sleep_step(model, opts, c, z, active_set, config, rng):
    k = active_set[rng.integers(len(active_set))]
    c_prime, _ = intervene(c, k, config.variant, rng)
    cyc = latent_cycle_loss(c_prime, z, model.decode, model.encode, config.cycle_includes_z)
    value = cyc.item()
    dc.backward(cyc * config.gamma)
    opts.dec.step()
    if not config.sleep_decoder_only:
        opts.enc.step()
    model.zero_grad()
    return value


def disc_step(model, opts, x, active_set, config, rng):
    with dc.no_grad():
        post = model.encode(x)
        c = reparameterize(post.mu_c, post.logvar_c, rng.normal(post.mu_c.shape)).data
    k = active_set[rng.integers(len(active_set))]
    c_prime, _ = intervene(c, k, config.variant, rng)
    l_psi = disc_loss(model, c, c_prime)
    value = l_psi.item()
    dc.backward(-l_psi)
    opts.disc.step()
    model.zero_grad()
    return value


def train_epoch(model, opts, images, config, schedule, epoch, rng):
    """One pass over ``images`` (``[N, P]`` float32). Returns the epoch log row."""
    sums = dict(elbo=0.0, kl_z=0.0, kl_c=0.0, adv=0.0, disc=0.0, cycle=0.0)
    n_batches = n_sleep = 0
    sleeping = interventions_active(config, epoch) and config.gamma > 0
    for b, idx in enumerate(_batches(len(images), config.batch_size, rng.child("shuffle", epoch))):
        x = Tensor(images[idx])
        try:
            stats, c, z = wake_step(model, opts, x, config, rng.child("wake", epoch, b))
            if sleeping:
                sums["cycle"] += sleep_step(model, opts, c, z, schedule.active_set, config,
                                            rng.child("sleep", epoch, b))
                n_sleep += 1
            sums["disc"] += disc_step(model, opts, x, schedule.active_set, config,
                                      rng.child("disc", epoch, b))
        except dc.NonFiniteError as err:
            dc.current_tape().reset()
            raise TrainingAborted(f"non-finite value at epoch {epoch}, batch {b}: {err}") from err
        for key in ("elbo", "kl_z", "kl_c", "adv"):
            sums[key] += stats[key]
        n_batches += 1
    return {
        "epoch": epoch,
        "loss_elbo": sums["elbo"] / n_batches,
        "loss_cycle": sums["cycle"] / n_sleep if n_sleep else 0.0,
        "loss_adv_enc": sums["adv"] / n_batches,
        "loss_disc": sums["disc"] / n_batches,
        "kl_z": sums["kl_z"] / n_batches,
        "kl_c": sums["kl_c"] / n_batches,
        "active_set": schedule.m,
    }


def relative_improvement(history, window):
    old, new = history[-window - 1], history[-1]
    return (old - new) / abs(old) if old else 0.0


def schedule_update(history, schedule, config, epoch):
    """Grow the active set by one dim once the ELBO has saturated.

    Saturation: relative improvement of the epoch-mean negative ELBO over the
    last ``sat_window`` epochs is below ``sat_threshold``, and at least
    ``sat_window`` epochs have passed since interventions began or the last
    growth. No-op before then or once ``m == K``.
    """
    if not interventions_active(config, epoch) or schedule.m >= config.K:
        return schedule
    if schedule.last_growth is None:
        schedule.last_growth = epoch  # first epoch with interventions
    W = config.sat_window
    if epoch - schedule.last_growth < W or len(history) < W + 1:
        return schedule
    if relative_improvement(history, W) < config.sat_threshold:
        schedule.m += 1
        schedule.last_growth = epoch
        log.info("epoch %d: active set grows to {1..%d}", epoch, schedule.m)
    return schedule


def mean_kl_z(model, images, batch_size=512):
    """Dataset mean of the analytic KL(q(z|x) || p(z)), summed over z dims, in float64."""
    total = 0.0
    with dc.no_grad():
        for i in range(0, len(images), batch_size):
            post = model.encode(Tensor(images[i:i + batch_size]))
            mu = post.mu_z.data.astype(np.float64)
            lv = post.logvar_z.data.astype(np.float64)
            total += (0.5 * (mu ** 2 + np.exp(lv) - lv - 1.0)).sum()
    return total / len(images)


def stop_check(model, images, schedule, config, epoch):
    """True when z carries (almost) no information, the budget is spent, or
    the desired number of factors is active."""
    if interventions_active(config, epoch):
        if config.desired_factors is not None and schedule.m >= config.desired_factors:
            schedule.stopped, schedule.stop_reason = True, "desired factors"
            return True
        if mean_kl_z(model, images) <= config.kl_stop:
            schedule.stopped, schedule.stop_reason = True, "kl_z below threshold"
            return True
    if epoch + 1 >= config.epochs:
        schedule.stopped, schedule.stop_reason = True, "epoch budget"
        return True
    return False


def batch_losses(model, x, config, seed, k=1):
    """All loss terms for one batch without updating anything (deterministic in ``seed``)."""
    rng = CounterRNG(seed)
    x = Tensor(x)
    K = model.config.K
    with dc.no_grad():
        post = model.encode(x)
        noise = rng.normal((x.shape[0], K + model.config.d))
        c = reparameterize(post.mu_c, post.logvar_c, noise[:, :K])
        z = reparameterize(post.mu_z, post.logvar_z, noise[:, K:])
        elbo, _, kl_z, kl_c = elbo_terms(x, post, model.decode(c, z))
        c_prime, _ = intervene(c, k, config.variant, rng)
        cyc = latent_cycle_loss(c_prime, z.data, model.decode, model.encode, config.cycle_includes_z)
        return {"elbo": elbo.item(), "kl_z": kl_z.item(), "kl_c": kl_c.item(),
                "cycle": cyc.item(), "adv_enc": enc_adv_loss(model, c).item(),
                "disc": disc_loss(model, c, c_prime).item()}


@dataclass
class FitResult:
    model: DOTVAE
    log: list
    schedule: ScheduleState
    final_losses: dict
    checkpoint: Path = None


def _write_log(path, rows):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    tmp.replace(path)


def read_log(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "active_set") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def fit(config, dataset, out_dir=None, model=None, on_epoch=None):
    """Train a model on ``dataset`` (a FactoredDataset or ``[N, P]`` array).

    With ``out_dir``, writes ``run_config.json``, ``train_log.csv`` (after
    every epoch) and ``checkpoint/`` (at every active-set growth, every
    ``checkpoint_every`` epochs and at the end).
    """
    images = dataset.flat_images() if hasattr(dataset, "flat_images") else np.asarray(dataset)
    images = np.ascontiguousarray(images, dtype=np.float32).reshape(len(images), -1)
    rng = CounterRNG(config.seed)
    if model is None:
        model = DOTVAE(config.model_config(images.shape[1]), seed=config.seed)
    opts = Optimizers.for_model(model, config)
    schedule = ScheduleState()
    rows = []
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_config.json").write_text(json.dumps(config.to_json(), indent=2) + "\n")
        ckpt = out_dir / "checkpoint"

    def checkpoint(epoch):
        if ckpt is not None:
            save_checkpoint(model, ckpt, step=epoch + 1, active_set=schedule.active_set,
                            extra={"stop_reason": schedule.stop_reason})

    for epoch in range(config.epochs):
        row = train_epoch(model, opts, images, config, schedule, epoch, rng)
        rows.append(row)
        schedule.history.append(row["loss_elbo"])
        m_before = schedule.m
        schedule_update(schedule.history, schedule, config, epoch)
        done = stop_check(model, images, schedule, config, epoch)
        log.debug("epoch %d %s", epoch, row)
        if out_dir is not None:
            _write_log(out_dir / "train_log.csv", rows)
            if schedule.m != m_before or (epoch + 1) % config.checkpoint_every == 0:
                checkpoint(epoch)
        if on_epoch is not None:
            on_epoch(epoch, row, schedule)
        if done:
            break

    last_batch = images[: min(config.batch_size, len(images))]
    final = batch_losses(model, last_batch, config, seed=config.seed)
    checkpoint(len(rows) - 1)
    return FitResult(model, rows, schedule, final, ckpt)
