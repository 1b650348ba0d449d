"""Two-phase adversarial training.

Phase 1 trains the transfer generator G_LH against D_LH. Phase 2 trains the
synthesis generator G_A (plus the CTF embedding tables) against the same
D_LH, with CTFs computed by G_LH, which is frozen by default. Both phases
add the cut-paste bounding-box loss to the discriminator objective.
"""

from dataclasses import asdict, dataclass, field
import json
import logging
import math
from pathlib import Path
import time
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .config import RunConfig, config_hash
from .ctf import CtfExtractor
from .data import (
    Datasets,
    LabelSpaces,
    MixedBatchSampler,
    QualityTieredBatch,
    TOY_PATTERNS,
    load_tier,
    make_lq_from_hq,
    make_toy_dataset,
)
from .discriminator import Discriminator, d_hinge_loss, g_hinge_loss
from .errors import ContractError, TrainingAborted
from .evaluation import (
    EvalReport,
    SurrogateClassifier,
    classifier_outputs,
    evaluate_images,
    fid_surrogate,
    train_surrogate_classifier,
)
from .selfsup import paste_batch, sp_loss
from .synthesis import SynthesisGenerator, sample
from .transfer import TransferGenerator

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
REPORT_FILE = "report.json"


@dataclass
class LossRecord:
    step: int
    phase: int
    phase_step: int
    d_adv: float
    g_adv: float
    sp: float
    wall_time: float = 0.0

    def to_record(self):
        # wall time stays out of the stream so identical seeds give identical files
        return {
            "kind": "loss", "step": self.step, "phase": self.phase, "phase_step": self.phase_step,
            "d_adv": self.d_adv, "g_adv": self.g_adv, "sp": self.sp,
        }

    def is_finite(self):
        return all(math.isfinite(v) for v in (self.d_adv, self.g_adv, self.sp))


@dataclass
class PhaseState:
    phase: int = 1
    phase_step: int = 0
    global_step: int = 0
    batches_drawn: int = 0
    d_updates: int = 0
    g_updates: int = 0
    metric_history: List[float] = field(default_factory=list)
    switched_at: Optional[int] = None

    def enter_phase2(self):
        if self.phase != 1:
            raise ContractError("phase transitions are 1 -> 2 only")
        self.phase = 2
        self.phase_step = 0
        self.switched_at = self.global_step


def phase_switch_criterion(history, patience, threshold=0.01, phase_step=0, max_steps=None):
    """True once the monitored metric (lower is better) stopped improving.

    The first value sets the baseline. A later value counts as an
    improvement only if it is below ``best * (1 - threshold)``; after
    ``patience`` consecutive evaluations without one the criterion fires.
    It also fires when ``phase_step`` reaches ``max_steps``.
    """
    if max_steps is not None and phase_step >= max_steps:
        return True
    if len(history) <= patience:
        return False
    best = history[0]
    stale = 0
    for value in history[1:]:
        if value < best * (1.0 - threshold):
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= patience


class CTFGAN(nn.Module):
    """All trainable parts: G_LH, the CTF embeddings, G_A and D_LH."""

    def __init__(self, model_cfg, num_hq_classes, num_lq_classes):
        super().__init__()
        mc = model_cfg
        self.num_hq_classes = num_hq_classes
        self.num_lq_classes = num_lq_classes
        self.glh = TransferGenerator(
            mc.lq_resolution, mc.glh_channels, mc.glh_noise_dim, num_hq_classes, num_lq_classes
        )
        self.extractor = CtfExtractor(self.glh.cbn2_channels, num_lq_classes, mc.embed_dim)
        ctf_channels = [t + mc.embed_dim for t in mc.glh_channels[1:]]
        self.ga = SynthesisGenerator(
            mc.ga_noise_dim, mc.lq_resolution, mc.ga_channels, ctf_channels, num_hq_classes, mc.ga_norm
        )
        self.dlh = Discriminator(mc.hq_resolution, num_hq_classes, mc.d_channels, mc.d_extra_blocks)

    def ctfs(self, lq_images, lq_labels, class_id, noises=None, generator=None,
             frozen_glh=True, zero=False):
        if frozen_glh:
            with torch.no_grad():
                _, trace = self.glh(lq_images, lq_labels, class_id, noises, generator)
        else:
            _, trace = self.glh(lq_images, lq_labels, class_id, noises, generator)
        ctfs = self.extractor(trace, lq_images)
        if zero:
            ctfs = [c.zeros_like() for c in ctfs]
        return ctfs


def build_datasets(cfg):
    """Materialize the datasets a run config describes."""
    mc, dc = cfg.model, cfg.data
    factor = 2 ** mc.num_blocks
    if dc.toy is not None:
        toy = dc.toy
        hq = make_toy_dataset(toy.hq_per_class, toy.num_classes, mc.hq_resolution, toy.seed, "hq")
        lq_src = make_toy_dataset(toy.lq_per_class, toy.num_classes, mc.hq_resolution, toy.seed + 1, "lq")
        lq = make_lq_from_hq(lq_src, factor)
        hq_eval = make_toy_dataset(toy.eval_per_class, toy.num_classes, mc.hq_resolution, toy.seed + 2, "hq")
        names = list(TOY_PATTERNS[: toy.num_classes])
        spaces = LabelSpaces(names, [f"lq-{n}" for n in names])
    else:
        spaces = LabelSpaces(list(dc.hq_classes), list(dc.lq_classes))
        root = Path(dc.root)
        hq = load_tier(root, root / dc.hq_manifest, spaces, "hq", mc.hq_resolution)
        lq = load_tier(root, root / dc.lq_manifest, spaces, "lq", mc.lq_resolution)
        if dc.eval_manifest:
            hq_eval = load_tier(root, root / dc.eval_manifest, spaces, "hq", mc.hq_resolution)
        else:
            hq_eval = hq
    return Datasets(hq, lq, hq_eval, spaces).validate(mc.lq_resolution, mc.num_blocks)


class Trainer:
    """Owns models, optimizers, RNG streams and the phase state of one run."""

    def __init__(self, cfg: RunConfig, datasets: Datasets, run_dir=None, classifier=None):
        self.cfg = cfg
        self.tc = cfg.train
        self.datasets = datasets.validate(cfg.model.lq_resolution, cfg.model.num_blocks)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        spaces = datasets.label_spaces
        self.num_hq_classes = spaces.c_h
        with torch.random.fork_rng():
            torch.manual_seed(self.tc.seed)
            self.model = CTFGAN(cfg.model, spaces.c_h, spaces.c_l)
        self.gen = torch.Generator().manual_seed(self.tc.seed + 1)
        self.np_rng = np.random.default_rng(self.tc.seed + 2)
        self.sampler = MixedBatchSampler(datasets.hq, datasets.lq, self.tc.batch_size, self.tc.seed + 3)
        betas = (self.tc.beta1, self.tc.beta2)
        m = self.model
        self.opt_d = torch.optim.Adam(m.dlh.parameters(), lr=self.tc.lr_d, betas=betas)
        self.opt_glh = torch.optim.Adam(m.glh.parameters(), lr=self.tc.lr_g, betas=betas)
        ga_params = list(m.ga.parameters()) + list(m.extractor.parameters())
        if not self.tc.freeze_glh:
            ga_params += list(m.glh.parameters())
        self.opt_ga = torch.optim.Adam(ga_params, lr=self.tc.lr_g, betas=betas)
        self.state = PhaseState()
        self.records = []
        if classifier is None:
            classifier, acc = train_surrogate_classifier(
                datasets.hq.images, datasets.hq.labels, spaces.c_h,
                seed=cfg.eval.classifier_seed, epochs=cfg.eval.classifier_epochs,
            )
            logger.info("surrogate classifier train accuracy %.3f", acc)
        self.classifier = classifier
        self._real_feats = None
        self._apply_phase_modes()

    # ------------------------------------------------------------------ utils

    @property
    def real_features(self):
        if self._real_feats is None:
            _, self._real_feats = classifier_outputs(self.classifier, self.datasets.hq_eval.images)
        return self._real_feats

    def _apply_phase_modes(self):
        m = self.model
        m.train()
        if self.state.phase == 2 and self.tc.freeze_glh:
            m.glh.eval()
            m.glh.requires_grad_(False)

    def _next_batches(self, count):
        out = [self.sampler.batch(self.state.batches_drawn + i) for i in range(count)]
        self.state.batches_drawn += count
        return out

    def _classes(self, n):
        return torch.randint(self.num_hq_classes, (n,), generator=self.gen)

    def _guard(self, value, what):
        if not torch.isfinite(value).all():
            raise TrainingAborted(
                f"non-finite {what} at step {self.state.global_step} (phase {self.state.phase})",
                {"kind": "abort", "step": self.state.global_step, "phase": self.state.phase, "loss": what},
            )

    def _d_update(self, batch, fake, fake_labels):
        real, real_labels = batch.hq_images, batch.hq_labels
        both = torch.cat([real, fake])
        both_labels = torch.cat([real_labels, fake_labels])
        pasted, boxes, chosen = paste_batch(both, real, self.np_rng, self.tc.sp_fraction)
        images = torch.cat([both, pasted])
        labels = torch.cat([both_labels, both_labels[chosen]])
        out = self.model.dlh(images, labels)
        n_r, n_b = len(real), len(both)
        adv = d_hinge_loss(out.adv_score[:n_r], out.adv_score[n_r:n_b])
        sp = sp_loss(out.bbox_pred[n_b:], boxes)
        loss = adv + self.tc.lambda_sp * sp
        self._guard(loss, "discriminator loss")
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        self.state.d_updates += 1
        return adv.item(), sp.item()

    def _as_batches(self, batches):
        if isinstance(batches, QualityTieredBatch):
            batches = [batches] * self.tc.d_steps_per_g_step
        if len(batches) != self.tc.d_steps_per_g_step:
            raise ContractError(
                f"expected {self.tc.d_steps_per_g_step} batches (one per D update), got {len(batches)}"
            )
        return batches

    def _finish_step(self, d_vals, sp_vals, g_val, t0):
        st = self.state
        st.phase_step += 1
        st.global_step += 1
        return LossRecord(
            st.global_step, st.phase, st.phase_step,
            float(np.mean(d_vals)), g_val, float(np.mean(sp_vals)), time.perf_counter() - t0,
        )

    # ------------------------------------------------------------ phase steps

    def phase1_step(self, batches):
        """D updates on real vs G_LH output, then one G_LH update."""
        if self.state.phase != 1:
            raise ContractError("phase1_step called outside phase 1")
        t0 = time.perf_counter()
        batches = self._as_batches(batches)
        glh, dlh = self.model.glh, self.model.dlh
        d_vals, sp_vals = [], []
        for b in batches:
            c = self._classes(len(b.lq_images))
            with torch.no_grad():
                fake, _ = glh(b.lq_images, b.lq_labels, c, generator=self.gen)
            d, s = self._d_update(b, fake, c)
            d_vals.append(d)
            sp_vals.append(s)
        b = batches[-1]
        c = self._classes(len(b.lq_images))
        fake, _ = glh(b.lq_images, b.lq_labels, c, generator=self.gen)
        g_loss = g_hinge_loss(dlh(fake, c).adv_score)
        self._guard(g_loss, "generator loss")
        self.opt_glh.zero_grad(set_to_none=True)
        g_loss.backward()
        self.opt_glh.step()
        self.state.g_updates += 1
        return self._finish_step(d_vals, sp_vals, g_loss.item(), t0)

    def _fake_phase2(self, b, c, grad):
        m = self.model
        n = len(b.lq_images)
        frozen = self.tc.freeze_glh or not grad
        noises = m.glh.sample_noises(n, self.gen)
        z = torch.randn(n, m.ga.noise_dim, generator=self.gen)
        ctfs = m.ctfs(b.lq_images, b.lq_labels, c, noises, frozen_glh=frozen, zero=self.tc.ctf_ablation)
        return m.ga(z, ctfs, c)

    def phase2_step(self, batches):
        """D updates on real vs G_A output, then one G_A (+ embeddings) update."""
        if self.state.phase != 2:
            raise ContractError("phase2_step called outside phase 2")
        t0 = time.perf_counter()
        batches = self._as_batches(batches)
        d_vals, sp_vals = [], []
        for b in batches:
            c = self._classes(len(b.lq_images))
            with torch.no_grad():
                fake = self._fake_phase2(b, c, grad=False)
            d, s = self._d_update(b, fake, c)
            d_vals.append(d)
            sp_vals.append(s)
        b = batches[-1]
        c = self._classes(len(b.lq_images))
        fake = self._fake_phase2(b, c, grad=True)
        g_loss = g_hinge_loss(self.model.dlh(fake, c).adv_score)
        self._guard(g_loss, "generator loss")
        self.opt_ga.zero_grad(set_to_none=True)
        g_loss.backward()
        self.opt_ga.step()
        self.state.g_updates += 1
        return self._finish_step(d_vals, sp_vals, g_loss.item(), t0)

    def enter_phase2(self):
        self.state.enter_phase2()
        self._apply_phase_modes()
        self._emit({"kind": "phase_switch", "step": self.state.global_step, "phase": 2})

    # ------------------------------------------------------------ evaluation

    @torch.no_grad()
    def phase1_metric(self):
        """FID surrogate of G_LH translations of a fixed LQ slice."""
        glh = self.model.glh
        was = glh.training
        glh.eval()
        try:
            g = torch.Generator().manual_seed(self.cfg.eval.seed)
            lq = self.datasets.lq
            n = self.tc.switch_eval_samples
            idx = torch.randint(len(lq), (n,), generator=g)
            classes = torch.arange(n) % self.num_hq_classes
            outs = []
            for i in range(0, n, 128):
                sl = idx[i:i + 128]
                fake, _ = glh(lq.images[sl], lq.labels[sl], classes[i:i + 128], generator=g)
                outs.append(fake)
            _, feats = classifier_outputs(self.classifier, torch.cat(outs))
            return fid_surrogate(self.real_features, feats)
        finally:
            glh.train(was)

    @torch.no_grad()
    def generate(self, n, seed=None, batch_size=250):
        """``n`` G_A samples with classes cycling over the HQ label space."""
        g = torch.Generator().manual_seed(self.cfg.eval.seed if seed is None else seed)
        m, lq = self.model, self.datasets.lq
        out = []
        for i in range(0, n, batch_size):
            k = min(batch_size, n - i)
            classes = (torch.arange(i, i + k)) % self.num_hq_classes
            out.append(sample(m.ga, m.glh, m.extractor, lq.images, lq.labels, k, classes, g,
                              zero_ctfs=self.tc.ctf_ablation))
        return torch.cat(out)

    def evaluate(self, num_samples=None):
        n = num_samples or self.cfg.eval.num_samples
        fakes = self.generate(n)
        return evaluate_images(
            self.classifier, fakes, self.datasets.hq_eval.images, self.cfg.eval.is_splits,
            self.state.global_step, self.state.phase,
        )

    # ---------------------------------------------------------------- stream

    @property
    def metrics_path(self):
        return self.run_dir / METRICS_FILE if self.run_dir else None

    def _emit(self, record):
        self.records.append(record)
        if self.metrics_path is not None:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _truncate_stream(self, step):
        path = self.metrics_path
        if path is None or not path.exists():
            return
        kept = []
        for line in path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            if rec.get("step", 0) <= step:
                kept.append(line)
        path.write_text("".join(k + "\n" for k in kept), encoding="utf-8")

    # ------------------------------------------------------------ checkpoints

    def state_dict(self):
        st = asdict(self.state)
        return {
            "model": self.model.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "opt_glh": self.opt_glh.state_dict(),
            "opt_ga": self.opt_ga.state_dict(),
            "classifier": self.classifier.state_dict(),
            "phase_state": st,
            "gen_state": self.gen.get_state(),
            "np_rng_state": json.dumps(self.np_rng.bit_generator.state),
            "config": json.dumps(self.cfg.model_dump()),
            "num_classes": [self.num_hq_classes, self.datasets.label_spaces.c_l],
        }

    def load_state_dict(self, state):
        self.model.load_state_dict(state["model"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.opt_glh.load_state_dict(state["opt_glh"])
        self.opt_ga.load_state_dict(state["opt_ga"])
        self.classifier.load_state_dict(state["classifier"])
        self.state = PhaseState(**state["phase_state"])
        self.gen.set_state(state["gen_state"])
        self.np_rng.bit_generator.state = json.loads(state["np_rng_state"])
        self._real_feats = None
        self._apply_phase_modes()

    def save_checkpoint(self, directory=None):
        st = self.state
        if directory is None:
            if self.run_dir is None:
                raise ContractError("no run directory to place the checkpoint in")
            directory = self.run_dir / "checkpoints" / f"step-{st.global_step:06d}"
        manifest = {
            "step": st.global_step, "phase": st.phase, "phase_step": st.phase_step,
            "config_hash": config_hash(self.cfg),
        }
        return ckpt.save_bundle(directory, self.state_dict(), manifest)

    @classmethod
    def from_checkpoint(cls, directory, datasets=None, run_dir=None, cfg=None):
        manifest, state = ckpt.load_bundle(directory)
        stored = RunConfig.model_validate(json.loads(state["config"]))
        cfg = cfg or stored
        if datasets is None:
            datasets = build_datasets(cfg)
        clf = SurrogateClassifier(datasets.label_spaces.c_h)
        trainer = cls(cfg, datasets, run_dir, classifier=clf)
        trainer.load_state_dict(state)
        trainer.manifest = manifest
        return trainer

    # ------------------------------------------------------------------ loop

    def run(self):
        """Train both phases to completion; returns the list of checkpoint paths."""
        tc, st = self.tc, self.state
        saved = []
        if st.global_step == 0 and st.phase == 1 and self.run_dir is not None:
            self._truncate_stream(-1)
            saved.append(self.save_checkpoint())
        elif self.run_dir is not None:
            self._truncate_stream(st.global_step)

        def checkpoint_due():
            if tc.checkpoint_every and self.run_dir and st.global_step % tc.checkpoint_every == 0:
                saved.append(self.save_checkpoint())

        try:
            while st.phase == 1:
                if st.phase_step >= tc.phase1_max_steps:
                    self.enter_phase2()
                    break
                self._emit(self.phase1_step(self._next_batches(tc.d_steps_per_g_step)).to_record())
                if st.phase_step % tc.eval_every == 0:
                    metric = self.phase1_metric()
                    st.metric_history.append(metric)
                    self._emit({"kind": "phase1_metric", "step": st.global_step, "phase": 1,
                                "fid_surrogate": metric})
                if phase_switch_criterion(st.metric_history, tc.patience, tc.switch_threshold,
                                          st.phase_step, tc.phase1_max_steps):
                    self.enter_phase2()
                checkpoint_due()
            while st.phase_step < tc.phase2_max_steps:
                self._emit(self.phase2_step(self._next_batches(tc.d_steps_per_g_step)).to_record())
                checkpoint_due()
        except TrainingAborted as exc:
            if isinstance(exc.record, dict):
                self._emit(exc.record)
            raise
        if self.run_dir is not None and st.global_step > 0 and (
                not saved or saved[-1].name != f"step-{st.global_step:06d}"):
            saved.append(self.save_checkpoint())
        return saved


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoints: list
    metrics_path: Path
    report: EvalReport


def train(cfg, datasets=None, run_dir=None, resume_from=None):
    """Run a full training job and write checkpoints, metrics and a final report."""
    run_dir = Path(run_dir or cfg.output_dir)
    if datasets is None:
        datasets = build_datasets(cfg)
    if resume_from is not None:
        trainer = Trainer.from_checkpoint(resume_from, datasets, run_dir, cfg)
    else:
        trainer = Trainer(cfg, datasets, run_dir)
    checkpoints = trainer.run()
    report = trainer.evaluate()
    trainer._emit(report.to_record())
    (run_dir / REPORT_FILE).write_text(json.dumps(report.to_record(), indent=2, sort_keys=True))
    return RunArtifacts(run_dir, checkpoints, trainer.metrics_path, report)
