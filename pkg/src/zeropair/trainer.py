"""Training loop: alternating paired sets, latent invariance (DCN-0), pseudo pairs (DCN)."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import RunConfig
from .data import ZeroPairData, batch_indices, derive_seed
from .errors import ConfigError, InputError, NumericalError
from .losses import (HyperParams, LossReport, domain_cls_loss, identity_loss, l1_recon,
                     pseudo_pair_loss, ralsgan_d, ralsgan_g, total_loss)
from .model import ConditionalBatchNorm2d, ConditionMode, Domain, Networks, grad_reverse

log = logging.getLogger(__name__)

CKPT_FORMAT = "zeropair-ckpt/1"
LOG_COLUMNS = ["iteration", "step_type"] + LossReport.columns()
PAIR_SETS = {"RD": (Domain.R, Domain.D), "RS": (Domain.R, Domain.S)}


def lr_at(iteration: int, hp: HyperParams) -> float:
    """Constant for the first half of training, then linear decay to zero."""
    total = hp.total_iters
    if not 0 <= iteration <= total:
        raise InputError(f"iteration {iteration} outside [0, {total}]")
    half = total // 2
    if iteration < half:
        return hp.base_lr
    return hp.base_lr * (1 - (iteration - half) / half)


def select_pair_set(iteration: int) -> str:
    return "RD" if iteration % 2 == 0 else "RS"


@dataclass
class FreezeMask:
    """Per-parameter boolean masks; True marks entries the step may change."""

    masks: dict[str, torch.Tensor]

    def updatable_names(self) -> set[str]:
        return {name for name, m in self.masks.items() if bool(m.any())}

    def updatable_count(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        if m is not None:
            for p in m.parameters():
                p.requires_grad_(flag)


def _finite(**values) -> None:
    vals = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in values.items()}
    bad = {k: v for k, v in vals.items() if not math.isfinite(v)}
    if bad:
        raise NumericalError(f"non-finite loss: {bad}", bad)


class TrainState:
    """Networks, optimizers and the iteration counter of one run."""

    def __init__(self, cfg: RunConfig, data: ZeroPairData | None = None):
        self.cfg = cfg
        self.hp = cfg.loss
        self.data = data
        self.iteration = 0
        torch.manual_seed(derive_seed(cfg.train.seed, "init"))
        self.nets = Networks(cfg.model)
        self.registry = self.nets.registry
        betas = (self.hp.beta1, self.hp.beta2)
        lr = self.hp.base_lr
        gen_params = list(self.nets.encoder.parameters()) + list(self.nets.decoder.parameters())
        self.optimizers = {
            "generator": torch.optim.Adam(gen_params, lr, betas=betas),
            "discriminator": torch.optim.Adam(self.nets.discriminators.parameters(), lr,
                                              betas=betas),
        }
        if self.mode is ConditionMode.OUTPUT_ONLY:
            self.optimizers["classifier"] = torch.optim.Adam(
                self.nets.classifier.parameters(), lr, betas=betas)
            # separate moments: a zero reversed gradient must leave the encoder untouched
            self.optimizers["encoder_adv"] = torch.optim.Adam(
                self.nets.encoder.parameters(), lr, betas=betas)
        else:
            if cfg.train.freeze == "ds_rows":
                tables = [p for _, m in self.nets.decoder.cbn_layers() for p in (m.weight, m.bias)]
            else:
                tables = list(self.nets.decoder.parameters())
            self.optimizers["pseudo"] = torch.optim.Adam(tables, lr, betas=betas)
        self.nets.train()

    @property
    def mode(self) -> ConditionMode:
        return self.cfg.model.mode

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    # -- supervised -----------------------------------------------------------------

    def train_step_supervised(self, pair_set: str, a: torch.Tensor, b: torch.Tensor) -> LossReport:
        """One critic update, then one generator update on a paired batch from ``pair_set``."""
        if pair_set not in PAIR_SETS:
            raise ConfigError(f"unknown pair set {pair_set!r}")
        if a.shape != b.shape:
            raise InputError("paired batch halves differ in shape")
        dom_a, dom_b = PAIR_SETS[pair_set]
        nets, reg, hp = self.nets, self.registry, self.hp
        n = a.shape[0]
        nets.train()

        idx = torch.tensor([reg.index(dom_a, dom_b)] * n + [reg.index(dom_b, dom_a)] * n
                           + [reg.index(dom_a, dom_a)] * n + [reg.index(dom_b, dom_b)] * n)
        z = nets.encoder(torch.cat([a, b]))
        z_a, z_b = z[:n], z[n:]
        out = nets.decoder(torch.cat([z_a, z_b, z_a, z_b]), idx)
        fake_b, fake_a, idt_a, idt_b = out.split(n)
        disc_a, disc_b = nets.discriminators[dom_a], nets.discriminators[dom_b]

        _set_requires_grad([nets.discriminators], True)
        s_b = disc_b(torch.cat([b, fake_b.detach()]))
        s_a = disc_a(torch.cat([a, fake_a.detach()]))
        loss_d = ralsgan_d(s_b[:n], s_b[n:]) + ralsgan_d(s_a[:n], s_a[n:])
        _finite(gan_d=loss_d)
        opt_d = self.optimizers["discriminator"]
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        _set_requires_grad([nets.discriminators], False)
        s_b = disc_b(torch.cat([b, fake_b]))
        s_a = disc_a(torch.cat([a, fake_a]))
        parts = LossReport(
            gan_g=ralsgan_g(s_b[:n], s_b[n:]) + ralsgan_g(s_a[:n], s_a[n:]),
            gan_d=loss_d.detach(),
            l1=(l1_recon(fake_a, a, hp.domain_weight(dom_a))
                + l1_recon(fake_b, b, hp.domain_weight(dom_b))),
            idt=(identity_loss(idt_a, a, hp.domain_weight(dom_a))
                 + identity_loss(idt_b, b, hp.domain_weight(dom_b))),
        )
        total = total_loss(parts, hp, "supervised")
        _finite(total=total)
        opt_g = self.optimizers["generator"]
        opt_g.zero_grad()
        total.backward()
        opt_g.step()
        _set_requires_grad([nets.discriminators], True)
        parts.total = total.detach()
        return _to_floats(parts)

    # -- DCN-0 ----------------------------------------------------------------------

    def train_step_invariance(self, images: torch.Tensor, domains: torch.Tensor) -> LossReport:
        """Classifier learns the latent's domain; the encoder gets the reversed, scaled gradient."""
        if self.mode is not ConditionMode.OUTPUT_ONLY:
            raise ConfigError("the invariance step exists only in output-conditioned mode")
        nets = self.nets
        nets.encoder.train()
        z = nets.encoder(images)
        logits = nets.classifier(grad_reverse(z, self.hp.lambda_cls))
        loss = domain_cls_loss(logits, domains)
        _finite(cls=loss)
        opt_c, opt_e = self.optimizers["classifier"], self.optimizers["encoder_adv"]
        opt_c.zero_grad()
        opt_e.zero_grad()
        loss.backward()
        opt_c.step()
        opt_e.step()
        nets.encoder.zero_grad(set_to_none=True)
        return LossReport(cls=loss.item(), total=loss.item())

    # -- DCN ------------------------------------------------------------------------

    def freeze_mask_ds(self) -> FreezeMask:
        if self.mode is not ConditionMode.INPUT_OUTPUT:
            raise ConfigError("pseudo-pair freezing needs input-output conditioning")
        ds = self.registry.index(Domain.D, Domain.S)
        table_ids = {id(p) for _, m in self.nets.decoder.cbn_layers() for p in (m.weight, m.bias)}
        masks = {}
        for name, p in self.nets.named_parameters():
            m = torch.zeros_like(p, dtype=torch.bool)
            if name.startswith("decoder.") and self.cfg.train.freeze == "decoder":
                m[...] = True
            elif id(p) in table_ids:
                m[ds] = True
            masks[name] = m
        return FreezeMask(masks)

    def train_step_pseudo(self, r: torch.Tensor, d: torch.Tensor) -> LossReport:
        """Pull g_DS(f(d)) toward the fixed target g_RS(f(r)) for a paired (r, d) batch.

        Runs with frozen normalization statistics so nothing outside the mask moves.
        """
        if self.mode is not ConditionMode.INPUT_OUTPUT:
            raise ConfigError("pseudo-pair steps need input-output conditioning")
        nets, reg = self.nets, self.registry
        mask = self.freeze_mask_ds()
        params = dict(nets.named_parameters())
        was_training = nets.training
        nets.eval()
        try:
            for name, p in params.items():
                p.requires_grad_(bool(mask.masks[name].any()))
            with torch.no_grad():
                z = nets.encoder(torch.cat([r, d]))
                target = nets.decoder(z[:len(r)], reg.index(Domain.R, Domain.S))
            pred = nets.decoder(z[len(r):], reg.index(Domain.D, Domain.S))
            loss = pseudo_pair_loss(target, pred)
            _finite(pseudo=loss)
            opt = self.optimizers["pseudo"]
            opt.zero_grad()
            loss.backward()
            for name, p in params.items():
                if p.grad is not None:
                    p.grad.mul_(mask.masks[name])
            opt.step()
        finally:
            for p in params.values():
                p.requires_grad_(True)
            nets.zero_grad(set_to_none=True)
            nets.train(was_training)
        return LossReport(pseudo=loss.item(), total=loss.item())

    # -- schedule -------------------------------------------------------------------

    def _batch(self, pair_set: str, step: int, stream: str):
        data = self.data
        if pair_set == "RD":
            xa, xb = data.rd_rgb, data.rd_depth
        else:
            xa, xb = data.rs_rgb, data.rs_sem
        seed = derive_seed(self.cfg.train.seed, f"batches-{stream}")
        idx = torch.from_numpy(batch_indices(len(xa), self.hp.batch_size, seed, step))
        return xa[idx], xb[idx]

    def pseudo_due(self, iteration: int) -> bool:
        t = self.cfg.train
        return (self.mode is ConditionMode.INPUT_OUTPUT and t.pseudo
                and iteration >= t.pseudo_start
                and (iteration - t.pseudo_start) % t.pseudo_every == 0)

    def step(self) -> list[tuple[str, LossReport]]:
        """Run every update scheduled for the current iteration and advance the counter."""
        i = self.iteration
        if i >= self.hp.total_iters:
            raise ConfigError("training already finished")
        self.set_lr(lr_at(i, self.hp))
        pair_set = select_pair_set(i)
        a, b = self._batch(pair_set, i // 2, pair_set)
        rows = [("supervised_" + pair_set, self.train_step_supervised(pair_set, a, b))]
        if self.mode is ConditionMode.OUTPUT_ONLY and self.cfg.train.invariance:
            dom_a, dom_b = PAIR_SETS[pair_set]
            labels = torch.tensor([int(dom_a)] * len(a) + [int(dom_b)] * len(b))
            rows.append(("invariance", self.train_step_invariance(torch.cat([a, b]), labels)))
        if self.pseudo_due(i):
            k = (i - self.cfg.train.pseudo_start) // self.cfg.train.pseudo_every
            r, d = self._batch("RD", k, "pseudo")
            rows.append(("pseudo", self.train_step_pseudo(r, d)))
        self._check_params()
        self.iteration += 1
        return rows

    def _check_params(self) -> None:
        for name, p in self.nets.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericalError(f"non-finite values in {name}", {"param": name})

    # -- checkpoints ----------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format": CKPT_FORMAT,
            "mode": self.mode.value,
            "n_domains": self.cfg.model.n_domains,
            "config_hash": self.cfg.hash(),
            "iteration": self.iteration,
            "condition_index": "source * n_domains + target" if self.mode is
            ConditionMode.INPUT_OUTPUT else "target",
            "network": self.cfg.model.to_dict(),
            "config": self.cfg.to_dict(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "manifest": self.manifest(),
            "params": {k: v.clone() for k, v in self.nets.state_dict().items()},
            "optimizers": {k: opt.state_dict() for k, opt in self.optimizers.items()},
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        return path

    def load(self, path) -> None:
        payload = load_checkpoint(path)
        man = payload["manifest"]
        if man["mode"] != self.mode.value or man["network"] != self.cfg.model.to_dict():
            raise ConfigError(f"checkpoint {path} was written for a different network")
        self.nets.load_state_dict(payload["params"])
        for k, opt in self.optimizers.items():
            opt.load_state_dict(payload["optimizers"][k])
        self.iteration = int(man["iteration"])


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises assorted types for corrupt archives
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("manifest", {}).get("format") != CKPT_FORMAT:
        raise ConfigError(f"{path} is not a {CKPT_FORMAT} archive")
    return payload


def networks_from_checkpoint(path) -> tuple[Networks, RunConfig, dict]:
    from .config import config_from_dict

    payload = load_checkpoint(path)
    cfg = config_from_dict(payload["manifest"]["config"])
    nets = Networks(cfg.model)
    nets.load_state_dict(payload["params"])
    nets.eval()
    return nets, cfg, payload["manifest"]


def _to_floats(parts: LossReport) -> LossReport:
    return LossReport(*(float(v) for v in parts.as_row()))


def _format(v) -> str:
    return repr(float(v))


class _LossLog:
    def __init__(self, path: Path, start: int):
        self.path = path
        kept = []
        if start > 0 and path.exists():
            with path.open(newline="") as fh:
                reader = csv.reader(fh)
                next(reader, None)
                kept = [row for row in reader if int(row[0]) < start]
        self.fh = path.open("w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(LOG_COLUMNS)
        self.writer.writerows(kept)

    def write(self, iteration: int, rows) -> None:
        for step_type, rep in rows:
            self.writer.writerow([iteration, step_type] + [_format(v) for v in rep.as_row()])

    def close(self) -> None:
        self.fh.close()


def configure_determinism(threads: int) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def run_training(cfg: RunConfig, data: ZeroPairData | None = None, resume=None,
                 stop_after: int | None = None, progress=None) -> tuple[Path, Path]:
    """Train to ``total_iters`` (or ``stop_after``) and return (final checkpoint, loss log).

    Checkpoints land in ``<out_dir>/checkpoints``; on a numerical abort the last
    written checkpoint stays in place and NumericalError propagates.
    """
    from .config import load_data

    configure_determinism(cfg.train.threads)
    if data is None:
        data = load_data(cfg)
    for name in ("rd_rgb", "rs_rgb"):
        if len(getattr(data, name)) < cfg.loss.batch_size:
            raise ConfigError(f"split behind {name} is smaller than one batch")
    state = TrainState(cfg, data)
    out = Path(cfg.train.out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state.load(resume)
    log_path = out / "train_log.csv"
    loss_log = _LossLog(log_path, state.iteration)
    end = cfg.loss.total_iters if stop_after is None else min(stop_after, cfg.loss.total_iters)
    every = cfg.checkpoint_every
    last = None
    try:
        while state.iteration < end:
            i = state.iteration
            rows = state.step()
            loss_log.write(i, rows)
            if progress is not None:
                progress(i, rows)
            if state.iteration % every == 0 or state.iteration == cfg.loss.total_iters:
                last = state.save(ckpt_dir / f"ckpt_{state.iteration:07d}.pt")
    finally:
        loss_log.close()
    if last is None or state.iteration % every:
        last = state.save(ckpt_dir / f"ckpt_{state.iteration:07d}.pt")
    return last, log_path
