"""Training graph, update steps, schedule, checkpoints and inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses
from .core import (
    DiscriminatorReport,
    Hyperparameters,
    LossReport,
    hparams_from_dict,
    sample_noise,
    save_config,
)
from .data import CyclingSampler, UnpairedDataset, save_png
from .networks import ModelSet, build_models, discriminator_forward

log = logging.getLogger(__name__)

# Fields that change how long or how verbosely a run goes, not what it learns.
_RUN_LENGTH_FIELDS = ("total_iters", "checkpoint_every", "log_every", "sample_every")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(RuntimeError):
    pass


def lr_at(i: int, h: Hyperparameters) -> float:
    """Step-decayed learning rate: halved every ``lr_halve_every`` iterations."""
    if i < 0:
        raise ValueError(f"iteration must be >= 0, got {i}")
    return h.lr0 * 0.5 ** (i // h.lr_halve_every)


def model_hash(h: Hyperparameters) -> str:
    return h.replace(**{k: getattr(Hyperparameters(), k) for k in _RUN_LENGTH_FIELDS}).digest()


@dataclass
class TranslationBundle:
    x_S: torch.Tensor
    x_T: torch.Tensor
    z1: torch.Tensor
    z2: torch.Tensor
    z3: torch.Tensor
    x_bar_T: torch.Tensor
    x_hat_S: torch.Tensor
    x_tilde_S: torch.Tensor
    x_idt_S: torch.Tensor | None = None
    x_idt_T: torch.Tensor | None = None
    masks: dict[str, torch.Tensor] = field(default_factory=dict)

    def detached(self) -> "TranslationBundle":
        def d(t):
            return None if t is None else t.detach()

        return TranslationBundle(
            *(d(getattr(self, k)) for k in ("x_S", "x_T", "z1", "z2", "z3", "x_bar_T", "x_hat_S", "x_tilde_S")),
            x_idt_S=d(self.x_idt_S),
            x_idt_T=d(self.x_idt_T),
            masks={k: v.detach() for k, v in self.masks.items()},
        )


def build_translation_graph(g_S, g_T, x_S, x_T, rng: torch.Generator, identity: bool = True) -> TranslationBundle:
    """Run the source-to-target chain and, optionally, both identity paths.

    x_bar_T = G_T(x_S, z1), x_hat_S = G_S(x_bar_T, z2), x_tilde_S = G_S(x_S, z3);
    identity outputs use noise from each generator's own noise encoder. The
    three noise batches are drawn from ``rng`` in that order.
    """
    if x_S.dim() != 4 or x_T.dim() != 4 or x_S.shape[1:] != x_T.shape[1:]:
        raise ValueError(f"incompatible batches {tuple(x_S.shape)} and {tuple(x_T.shape)}")
    n, d_z = x_S.shape[0], g_T.cfg.d_z
    z1, z2, z3 = (sample_noise(n, d_z, rng, dtype=x_S.dtype) for _ in range(3))
    masks = {}

    def run(g, x, z, name):
        out, mask = g.translate(x, z)
        if mask is not None:
            masks[name] = mask
        return out

    x_bar_T = run(g_T, x_S, z1, "x_bar_T")
    x_hat_S = run(g_S, x_bar_T, z2, "x_hat_S")
    x_tilde_S = run(g_S, x_S, z3, "x_tilde_S")
    bundle = TranslationBundle(x_S, x_T, z1, z2, z3, x_bar_T, x_hat_S, x_tilde_S, masks=masks)
    if identity:
        bundle.x_idt_S = run(g_S, x_S, g_S.encode_noise(x_S), "x_idt_S")
        bundle.x_idt_T = run(g_T, x_T, g_T.encode_noise(x_T), "x_idt_T")
    return bundle


def _check_finite(named: dict[str, torch.Tensor], where: str) -> None:
    bad = {k: float(v.detach()) for k, v in named.items() if not math.isfinite(float(v.detach()))}
    if bad:
        raise NonFiniteLossError(f"non-finite {where} loss: {bad}")


def discriminator_losses(bundle: TranslationBundle, models: ModelSet, h: Hyperparameters):
    b = bundle.detached()
    d_T = losses.lsgan_d(discriminator_forward(models.d_T, b.x_T), [discriminator_forward(models.d_T, b.x_bar_T)])
    d_S = losses.lsgan_d(
        discriminator_forward(models.d_S, b.x_S),
        [discriminator_forward(models.d_S, b.x_hat_S), discriminator_forward(models.d_S, b.x_tilde_S)],
    )
    d_acl = losses.acl_d(models.d_hat, b.x_S, b.x_hat_S, b.x_tilde_S, h.swap_acl_labels)
    return {"d_T": d_T, "d_S": d_S, "d_acl": d_acl}


def discriminator_step(bundle: TranslationBundle, models: ModelSet, optimizer, h: Hyperparameters) -> DiscriminatorReport:
    """One joint update of D_S, D_T and the consistency discriminator."""
    terms = discriminator_losses(bundle, models, h)
    _check_finite(terms, "discriminator")
    total = terms["d_T"] + terms["d_S"] + terms["d_acl"]
    optimizer.zero_grad(set_to_none=False)
    if total.requires_grad:
        total.backward()
    optimizer.step()
    values = {k: float(v.detach()) for k, v in terms.items()}
    return DiscriminatorReport(**values, total=sum(values.values()))


def generator_losses(bundle: TranslationBundle, models: ModelSet, h: Hyperparameters):
    b = bundle
    adv_T = losses.lsgan_g([discriminator_forward(models.d_T, b.x_bar_T)])
    adv_S = losses.lsgan_g([discriminator_forward(models.d_S, b.x_hat_S), discriminator_forward(models.d_S, b.x_tilde_S)])
    acl = losses.acl_g(models.d_hat, b.x_S, b.x_hat_S, b.x_tilde_S, h.swap_acl_labels)
    idt = losses.identity_loss(b.x_S, b.x_idt_S, b.x_T, b.x_idt_T)
    mask = losses.mask_loss(list(b.masks.values()), h) if h.masked and b.masks else torch.zeros(())
    return losses.total_generator_loss(adv_T, adv_S, acl, idt, mask, h)


def generator_step(bundle: TranslationBundle, models: ModelSet, optimizer, h: Hyperparameters) -> LossReport:
    """One update of both generators (and their noise encoders) with discriminators frozen."""
    frozen = [p for d in models.discriminators() for p in d.parameters()]
    flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)
    try:
        try:
            total, report = generator_losses(bundle, models, h)
        except FloatingPointError as exc:
            raise NonFiniteLossError(str(exc)) from None
        optimizer.zero_grad(set_to_none=False)
        if total.requires_grad:
            total.backward()
        optimizer.step()
    finally:
        for p, flag in zip(frozen, flags):
            p.requires_grad_(flag)
    return report


def parameter_checksum(modules) -> float:
    """Order-sensitive float64 digest of all parameters (for freeze checks)."""
    acc = 0.0
    for m in modules:
        for i, p in enumerate(m.parameters()):
            acc += float((p.detach().double().flatten() * (1 + (i % 7))).sum())
    return acc


# ---------------------------------------------------------------- trainer


def _image_grid(rows: list[torch.Tensor]) -> torch.Tensor:
    rows = [r if r.shape[1] == 3 else r.repeat(1, 3, 1, 1) * 2 - 1 for r in rows]
    return torch.cat([torch.cat(list(r), dim=2) for r in rows], dim=1)


class Trainer:
    """Stateful training loop over an unpaired dataset.

    Each logical iteration runs ``d_updates_per_g`` discriminator updates on
    fresh batches and fresh noise, then one generator update.
    """

    def __init__(self, h: Hyperparameters, dataset: UnpairedDataset, out_dir: str | Path | None = None, seed: int = 0,
                 sink: Callable[[dict], None] | None = None, models: ModelSet | None = None):
        self.h = h
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.seed = seed
        self.sink = sink
        self.models = models if models is not None else build_models(h, seed)
        g_params = [p for g in self.models.generators() for p in g.parameters()]
        d_params = [p for d in self.models.discriminators() for p in d.parameters()]
        self.opt_G = torch.optim.Adam(g_params, lr=h.lr0, betas=h.betas)
        self.opt_D = torch.optim.Adam(d_params, lr=h.lr0, betas=h.betas)
        self.noise_rng = torch.Generator().manual_seed(seed)
        self.data_rng = np.random.default_rng(seed)
        self.sampler_S = CyclingSampler(len(dataset.images_S))
        self.sampler_T = CyclingSampler(len(dataset.images_T))
        self.iteration = 0
        self.d_steps = 0
        self.g_steps = 0
        self.last_checkpoint: Path | None = None
        self.last_bundle: TranslationBundle | None = None

    def _batches(self):
        n = self.h.batch_size
        x_S = self.dataset.batch("S", self.sampler_S.take(n, self.data_rng), self.data_rng)
        x_T = self.dataset.batch("T", self.sampler_T.take(n, self.data_rng), self.data_rng)
        return x_S, x_T

    def _set_lr(self):
        lr = lr_at(self.iteration, self.h)
        for opt in (self.opt_G, self.opt_D):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def step(self) -> tuple[LossReport, DiscriminatorReport]:
        lr = self._set_lr()
        g_S, g_T = self.models.g_S, self.models.g_T
        for _ in range(self.h.d_updates_per_g):
            x_S, x_T = self._batches()
            with torch.no_grad():
                bundle = build_translation_graph(g_S, g_T, x_S, x_T, self.noise_rng, identity=False)
            d_report = discriminator_step(bundle, self.models, self.opt_D, self.h)
            self.d_steps += 1
        x_S, x_T = self._batches()
        bundle = build_translation_graph(g_S, g_T, x_S, x_T, self.noise_rng)
        g_report = generator_step(bundle, self.models, self.opt_G, self.h)
        self.g_steps += 1
        self.iteration += 1
        self.last_bundle = bundle.detached()
        if self.iteration % self.h.log_every == 0 or self.iteration == self.h.total_iters:
            self._emit(g_report, d_report, lr)
        return g_report, d_report

    def _emit(self, g: LossReport, d: DiscriminatorReport, lr: float) -> None:
        record = {"iteration": self.iteration, "lr": lr, **g.as_dict()}
        record.update({k if k.startswith("d_") else "d_" + k: v for k, v in d.as_dict().items()})
        if self.sink is not None:
            self.sink(record)
        if self.out_dir is not None:
            with open(self.out_dir / "losses.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def write_samples(self) -> Path | None:
        if self.out_dir is None or self.last_bundle is None:
            return None
        b = self.last_bundle
        rows = [b.x_S, b.x_bar_T, b.x_hat_S, b.x_tilde_S]
        if "x_bar_T" in b.masks:
            rows.insert(2, b.masks["x_bar_T"])
        path = self.out_dir / "samples" / f"iter_{self.iteration:07d}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_png(_image_grid(rows), path)
        return path

    def run(self, until: int | None = None) -> Path | None:
        until = self.h.total_iters if until is None else until
        while self.iteration < until:
            try:
                self.step()
            except NonFiniteLossError as exc:
                exc.last_checkpoint = self.last_checkpoint
                log.error("aborting at iteration %d: %s (last checkpoint: %s)", self.iteration, exc, self.last_checkpoint)
                raise
            if self.out_dir is not None:
                if self.iteration % self.h.sample_every == 0:
                    self.write_samples()
                if self.iteration % self.h.checkpoint_every == 0 or self.iteration == until:
                    self.save(self.out_dir / "checkpoints" / f"iter_{self.iteration:07d}")
        return self.last_checkpoint

    # ------------------------------------------------------------ checkpoints

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for name, module in self.models.items():
            torch.save(module.state_dict(), path / f"{name}.pt")
        torch.save(
            {
                "opt_G": self.opt_G.state_dict(),
                "opt_D": self.opt_D.state_dict(),
                "noise_rng": self.noise_rng.get_state(),
                "data_rng": self.data_rng.bit_generator.state,
                "sampler_S": self.sampler_S.state_dict(),
                "sampler_T": self.sampler_T.state_dict(),
            },
            path / "train_state.pt",
        )
        save_config(self.h, path / "config.json")
        manifest = {
            "iteration": self.iteration,
            "d_steps": self.d_steps,
            "g_steps": self.g_steps,
            "seed": self.seed,
            "d_z": self.h.d_z,
            "hparams_hash": model_hash(self.h),
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        self.last_checkpoint = path
        return path

    @classmethod
    def resume(cls, path: str | Path, dataset: UnpairedDataset, h: Hyperparameters | None = None,
               out_dir: str | Path | None = None, sink=None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; ``h`` may only differ in run-length fields."""
        path = Path(path)
        manifest, stored = read_checkpoint_meta(path)
        h = stored if h is None else h
        if model_hash(h) != manifest["hparams_hash"]:
            raise CheckpointError(f"hyperparameter hash mismatch for checkpoint {path}")
        trainer = cls(h, dataset, out_dir, manifest["seed"], sink, models=load_models(path, stored))
        state = torch.load(path / "train_state.pt", weights_only=False)
        trainer.opt_G.load_state_dict(state["opt_G"])
        trainer.opt_D.load_state_dict(state["opt_D"])
        trainer.noise_rng.set_state(state["noise_rng"])
        trainer.data_rng.bit_generator.state = state["data_rng"]
        trainer.sampler_S.load_state_dict(state["sampler_S"])
        trainer.sampler_T.load_state_dict(state["sampler_T"])
        trainer.iteration = manifest["iteration"]
        trainer.d_steps = manifest["d_steps"]
        trainer.g_steps = manifest["g_steps"]
        trainer.last_checkpoint = path
        return trainer


def read_checkpoint_meta(path: str | Path) -> tuple[dict, Hyperparameters]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        h = hparams_from_dict(json.loads((path / "config.json").read_text()))
    except FileNotFoundError as exc:
        raise CheckpointError(f"not a checkpoint directory: {path} ({exc.filename} missing)") from None
    if model_hash(h) != manifest.get("hparams_hash"):
        raise CheckpointError(f"config.json in {path} does not match the manifest hash")
    return manifest, h


def load_models(path: str | Path, h: Hyperparameters | None = None, names=ModelSet.NAMES) -> ModelSet:
    path = Path(path)
    if h is None:
        _, h = read_checkpoint_meta(path)
    models = build_models(h)
    for name in names:
        getattr(models, name).load_state_dict(torch.load(path / f"{name}.pt", weights_only=True))
    return models


def train(h: Hyperparameters, dataset: UnpairedDataset, out_dir: str | Path, seed: int = 0,
          resume: str | Path | None = None, sink=None) -> Path | None:
    """Run (or continue) training until ``h.total_iters``; return the final checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(h, out / "config.json")
    if resume is not None:
        trainer = Trainer.resume(resume, dataset, h, out, sink)
    else:
        trainer = Trainer(h, dataset, out, seed, sink)
    return trainer.run()


# ---------------------------------------------------------------- inference


def translate(checkpoint, image: torch.Tensor, n_styles: int, seed: int, generator=None):
    """Translate one image (3, H, W) to the target domain under ``n_styles`` noise draws.

    Returns a list of (image, mask-or-None) pairs. ``generator`` overrides the
    checkpoint's G_T (useful for stubs).
    """
    if n_styles < 1:
        raise ValueError("n_styles must be >= 1")
    if generator is None:
        path = Path(checkpoint)
        if not (path / "g_T.pt").is_file():
            raise FileNotFoundError(f"no generator weights under {path}")
        generator = load_models(path, names=("g_T",)).g_T
    generator.eval()
    rng = torch.Generator().manual_seed(seed)
    x = image[None] if image.dim() == 3 else image
    outputs = []
    with torch.no_grad():
        for _ in range(n_styles):
            z = sample_noise(x.shape[0], generator.cfg.d_z, rng, dtype=x.dtype)
            out, mask = generator.translate(x, z)
            outputs.append((out[0] if image.dim() == 3 else out, None if mask is None else (mask[0] if image.dim() == 3 else mask)))
    return outputs
