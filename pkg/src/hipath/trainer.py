"""Training loop, checkpoints, gradient verification, evaluation, and ablation runs."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from . import __version__
from .checkpoint import load_tensors, save_tensors
from .config import ABLATIONS, TrainConfig, apply_overrides
from .hicl import NonFiniteCost
from .metrics import MetricReport, evaluate_predictions, retrieval_recall_at_1
from .model import DTYPE, HiPath, collate
from .report import Case, Vocabulary

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, parts: dict):
        super().__init__(f"non-finite loss at step {step}: {parts}")
        self.step = step
        self.parts = parts


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Cosine decay from lr_max at step 0 to exactly 0 at the last step."""
    if total_steps <= 1:
        return lr_max
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps - 1) / (total_steps - 1)))


def set_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


class Trainer:
    def __init__(self, cfg: TrainConfig, vocab: Vocabulary, vocab_table: np.ndarray, cases: Sequence[Case]):
        if not cases:
            raise ValueError("empty training set")
        if cfg.lr <= 0 or cfg.batch_size < 1:
            raise ValueError("lr must be > 0 and batch_size >= 1")
        self.cfg = cfg
        self.vocab = vocab
        self.cases = list(cases)
        self.model = HiPath(cfg, vocab, vocab_table)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay, foreach=False,
        )
        self.steps_per_epoch = math.ceil(len(self.cases) / cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.step = 0
        self.history: list[dict] = []
        self._epoch_acc: dict[str, float] = {}

    def batch_for_step(self, step: int):
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = epoch_order(self.cfg.seed, epoch, len(self.cases))
        idx = order[pos * self.cfg.batch_size : (pos + 1) * self.cfg.batch_size]
        return collate([self.cases[i] for i in idx])

    def train_step(self) -> dict[str, float]:
        batch = self.batch_for_step(self.step)
        lr = cosine_lr(self.step, self.total_steps, self.cfg.lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        try:
            parts = self.model.losses(batch)
        except NonFiniteCost as exc:
            # diverged features reach the transport solver before the loss is formed
            raise NonFiniteLoss(self.step, {"local": float("nan")}) from exc
        values = parts.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteLoss(self.step, values)
        self.optimizer.zero_grad(set_to_none=False)
        parts.total.backward()
        self.optimizer.step()
        self.step += 1
        for k, v in values.items():
            self._epoch_acc[k] = self._epoch_acc.get(k, 0.0) + v
        self._epoch_acc["_n"] = self._epoch_acc.get("_n", 0.0) + 1
        if self.step % self.steps_per_epoch == 0:
            self._close_epoch()
        return values

    def _close_epoch(self) -> None:
        n = self._epoch_acc.pop("_n", 1.0)
        rec = {"epoch": self.step // self.steps_per_epoch, "step": self.step}
        rec.update({k.rstrip("_"): v / n for k, v in self._epoch_acc.items()})
        self.history.append(rec)
        self._epoch_acc = {}
        log.info("epoch %d total=%.4f mdp=%.4f", rec["epoch"], rec["total"], rec["mdp"])

    def run(self, until_step: Optional[int] = None, on_epoch: Optional[Callable[[dict], None]] = None) -> "Trainer":
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        while self.step < stop:
            n_hist = len(self.history)
            self.train_step()
            if on_epoch is not None and len(self.history) > n_hist:
                on_epoch(self.history[-1])
        return self

    # --- persistence ------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {f"param.{n}": p for n, p in self.model.named_parameters()}
        names = [n for n, _ in self.model.named_parameters()]
        state = self.optimizer.state_dict()["state"]
        for i, name in enumerate(names):
            for key, val in state.get(i, {}).items():
                tensors[f"optim.{name}.{key}"] = torch.as_tensor(val, dtype=DTYPE)
        return tensors

    def save(self, path) -> None:
        header = {
            "toolkit_version": __version__,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "step": self.step,
            "history": self.history,
            "epoch_acc": self._epoch_acc,
        }
        save_tensors(path, self.state_tensors(), header)

    def load_state(self, tensors: dict[str, torch.Tensor], header: dict) -> None:
        if header["config_hash"] != self.cfg.config_hash():
            raise ValueError("checkpoint config does not match trainer config")
        names = [n for n, _ in self.model.named_parameters()]
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                p.copy_(tensors[f"param.{name}"])
        opt_state = self.optimizer.state_dict()
        new_state = {}
        for i, name in enumerate(names):
            entry = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                t = tensors.get(f"optim.{name}.{key}")
                if t is not None:
                    entry[key] = t.to(torch.float32) if key == "step" else t.clone()
            if entry:
                new_state[i] = entry
        opt_state["state"] = new_state
        self.optimizer.load_state_dict(opt_state)
        self.step = int(header["step"])
        self.history = list(header.get("history", []))
        self._epoch_acc = dict(header.get("epoch_acc", {}))

    @classmethod
    def from_checkpoint(cls, path, vocab: Vocabulary, vocab_table: np.ndarray, cases: Sequence[Case]) -> "Trainer":
        tensors, header = load_tensors(path)
        cfg = TrainConfig.from_dict(header["config"])
        trainer = cls(cfg, vocab, vocab_table, cases)
        trainer.load_state(tensors, header)
        return trainer


def load_model(path, vocab: Vocabulary, vocab_table: np.ndarray) -> HiPath:
    tensors, header = load_tensors(path)
    cfg = TrainConfig.from_dict(header["config"])
    model = HiPath(cfg, vocab, vocab_table)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[f"param.{name}"])
    return model


def train(cfg: TrainConfig, cases: Sequence[Case], vocab: Vocabulary, vocab_table: np.ndarray,
          on_epoch: Optional[Callable[[dict], None]] = None) -> Trainer:
    return Trainer(cfg, vocab, vocab_table, cases).run(on_epoch=on_epoch)


# --- evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    report: MetricReport
    r_at_1: float
    top1_by_images: dict[str, float]
    preds: list[dict] = field(default_factory=list)

    @property
    def top1(self) -> float:
        return float(self.report.row("All").pct("strict")) / 100

    @property
    def acceptable(self) -> float:
        return float(self.report.row("All").pct("acceptable")) / 100

    def summary(self) -> dict[str, float]:
        return {
            "top1": self.top1,
            "accept": self.acceptable,
            "r_at_1": self.r_at_1,
            "top1_4plus": self.top1_by_images.get("4plus", float("nan")),
            "top1_single": self.top1_by_images.get("single", float("nan")),
        }


def predict_cases(model: HiPath, cases: Sequence[Case], chunk: int = 64):
    model.eval()
    rows, z_vis, z_txt = [], [], []
    for start in range(0, len(cases), chunk):
        part = cases[start : start + chunk]
        batch = collate(part)
        probs, out = model.predict(batch)
        z_vis.append(out.z_vis.numpy())
        z_txt.append(out.z_txt.numpy())
        for b, case in enumerate(part):
            for k, slot in enumerate(case.slots):
                p = probs[b, k].numpy()
                rows.append({
                    "case_id": case.case_id,
                    "slot": k,
                    "pred": int(np.argmax(p)),
                    "truth": slot.truth_term,
                    "n_images": case.n_images,
                    "probs": p,
                })
    return rows, np.concatenate(z_vis), np.concatenate(z_txt)


def evaluate(model: HiPath, cases: Sequence[Case], vocab: Vocabulary) -> EvalResult:
    rows, zv, zt = predict_cases(model, cases)
    preds = [r["pred"] for r in rows]
    truths = [r["truth"] for r in rows]
    probs = np.stack([r["probs"] for r in rows])
    report = evaluate_predictions(preds, truths, vocab, probs)
    hits = np.array([p == t for p, t in zip(preds, truths)])
    n_img = np.array([r["n_images"] for r in rows])
    by_images = {}
    for name, sel in (("single", n_img == 1), ("multi", n_img > 1), ("4plus", n_img >= 4)):
        if sel.any():
            by_images[name] = float(hits[sel].mean())
    return EvalResult(report, retrieval_recall_at_1(zv, zt), by_images, rows)


# --- gradient verification --------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    alpha_dead_zone_grad: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_err.values()) and self.alpha_dead_zone_grad == 0.0

    def failing(self) -> list[str]:
        return [g for g, e in self.max_rel_err.items() if not e < self.tolerance]


def grad_check_setup(cfg: Optional[TrainConfig] = None, seed: int = 0, n_cases: int = 6):
    from .synthetic import Generator, GeneratorSpec, make_vocabulary

    cfg = copy.deepcopy(cfg) if cfg is not None else TrainConfig()
    apply_overrides(cfg, {"model.d": 8, "model.n_heads": 2, "model.d_vis": 8, "model.d_txt": 12,
                          "model.text_hidden": 8, "model.max_slots": 16, "seed": seed, "hicl.alpha_init": 1.7})
    vocab = make_vocabulary()
    spec = GeneratorSpec(seed=seed, n_cases=n_cases, d_vis=8, d_txt=12, patches_per_image=(2, 4),
                         j_distribution=(0.2, 0.2, 0.2, 0.4), noise_sigma=0.3)
    gen = Generator(spec, vocab)
    return cfg, vocab, gen.embeddings.table, gen.dataset()


def parameter_groups(model: HiPath) -> dict[str, list[torch.nn.Parameter]]:
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if len(parts) > 2 else ".".join(parts[:-1]) if len(parts) == 2 else parts[0]
        if len(parts) == 2 and parts[0] in ("hipa", "mdp"):
            key = name
        groups.setdefault(key, []).append(p)
    return groups


def grad_check(cfg: Optional[TrainConfig] = None, n_probes: int = 3, h: float = 1e-5, seed: int = 0,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Central-difference directional derivatives vs autograd, per parameter group.

    Transport plans are solved once at the base point and held fixed, matching
    the detached-plan gradient.
    """
    cfg, vocab, table, cases = grad_check_setup(cfg, seed)
    model = HiPath(cfg, vocab, table)
    batch = collate(cases)
    base = model.losses(batch)
    plans = base.plans
    model.zero_grad()
    base.total.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for gname, params in parameter_groups(model).items():
        worst = 0.0
        for _ in range(n_probes):
            dirs = [torch.as_tensor(rng.standard_normal(p.shape), dtype=DTYPE) for p in params]
            norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.add_(h * d)
                up = float(model.losses(batch, plans).total)
                for p, d in zip(params, dirs):
                    p.sub_(2 * h * d)
                down = float(model.losses(batch, plans).total)
                for p, d in zip(params, dirs):
                    p.add_(h * d)
            fd = (up - down) / (2 * h)
            err = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
            worst = max(worst, err)
        errors[gname] = worst

    with torch.no_grad():
        model.alpha.fill_(3.5)
    model.zero_grad()
    model.losses(batch).total.backward()
    return GradCheckReport(errors, float(model.alpha.grad), tolerance)


# --- ablation ---------------------------------------------------------------

ABLATION_ROWS = ("full", "no_hicl", "no_hipa", "flat_crossattn")
ROW_LABELS = {"full": "Full", "no_hicl": "w/o HiCL", "no_hipa": "w/o HiPA", "flat_crossattn": "Flat CrossAttn"}
ABLATION_COLUMNS = (("top1", "Top-1"), ("accept", "Accept."), ("r_at_1", "i2t R@1"), ("top1_4plus", "4+img Top-1"))

DataSource = Union[tuple, Callable[[int], tuple]]


def ablation_config(base: TrainConfig, row: str, seed: int) -> TrainConfig:
    cfg = copy.deepcopy(base)
    cfg.seed = seed
    cfg.ablation = dataclasses.replace(cfg.ablation, **ABLATIONS[row])
    return cfg


def ablate(base: TrainConfig, data: DataSource, seeds: Sequence[int] = (0, 1, 2),
           rows: Sequence[str] = ABLATION_ROWS, on_run: Optional[Callable[[str, int, dict], None]] = None) -> dict:
    """Train and evaluate each ablation row for each seed.

    ``data`` is (train_cases, test_cases, vocab, vocab_table) or a function of the seed returning it.
    Returns {row: {"runs": [summary per seed], "mean": {...}, "std": {...}}}.
    """
    table: dict[str, dict] = {}
    for row in rows:
        runs = []
        for seed in seeds:
            train_cases, test_cases, vocab, emb = data(seed) if callable(data) else data
            trainer = train(ablation_config(base, row, seed), train_cases, vocab, emb)
            summary = evaluate(trainer.model, test_cases, vocab).summary()
            runs.append(summary)
            if on_run is not None:
                on_run(row, seed, summary)
        keys = runs[0].keys()
        table[row] = {
            "runs": runs,
            "mean": {k: float(np.mean([r[k] for r in runs])) for k in keys},
            "std": {k: float(np.std([r[k] for r in runs])) for k in keys},
        }
    return table


def format_ablation(table: dict) -> str:
    head = [""] + [label for _, label in ABLATION_COLUMNS]
    body = []
    for row, res in table.items():
        cells = [ROW_LABELS.get(row, row)]
        for key, _ in ABLATION_COLUMNS:
            cells.append(f"{100 * res['mean'][key]:.1f} ± {100 * res['std'][key]:.1f}")
        body.append(cells)
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [head] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_metrics_log(history: list[dict], path, header: Optional[dict] = None) -> None:
    with Path(path).open("w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
