"""Training, evaluation, and ablation sweeps over the synthetic task."""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import synth
from .errors import NumericError
from .flow import (
    BlockMatchFlowProvider,
    FlowProviderError,
    aggregate_with_occlusion,
)
from .heatmap import binarize, gaussian_splat, overlay
from .ingest import AGGREGATED, SINGULAR, align_window
from .model import (
    ModelState,
    SampleInputs,
    backward_batch,
    batch_loss,
    greedy_decode,
    init_state,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    uses_gaze_block,
    uses_pseudo,
)
from .patches import PatchGrid, distribution_from_continuous, gaze_distribution
from .rouge import rouge_l


def render_tokens(ids):
    return [synth.TOKEN_WORDS[i] for i in ids]


class _TruthFlowProvider:
    def __init__(self, flows):
        self.flows = flows

    def __call__(self, src, dst):
        key_f = (src.frame_id, dst.frame_id)
        key_b = (dst.frame_id, src.frame_id)
        if key_f not in self.flows or key_b not in self.flows:
            raise FlowProviderError(src.frame_id, dst.frame_id, "no stored flow")
        return self.flows[key_f], self.flows[key_b]


def _window_for_frame(sample, cfg, f):
    ref = sample.frame_refs[f]
    if cfg.model == "singular_gaze":
        return align_window(sample.track, ref, SINGULAR, cfg.delta_ms)
    event = sample.event
    if cfg.occlusion == "on" and event is not None and event.frame_index == f:
        if cfg.flow_provider == "blockmatch":
            provider = BlockMatchFlowProvider(
                event.micro_images, block=cfg.flow_block, search=cfg.flow_search
            )
        else:
            provider = _TruthFlowProvider(event.flows)
        return aggregate_with_occlusion(
            sample.track, event.micro_refs + [ref], ref, cfg.delta_ms, provider,
            epsilon_px=cfg.epsilon_px, eta_threshold=cfg.eta_threshold,
            interp=cfg.flow_interp, mode=cfg.consistency_mode,
        )
    return align_window(sample.track, ref, AGGREGATED, cfg.delta_ms)


def gaze_preprocess(sample, cfg):
    """Distributions, overlays, and quantized gaze tokens for one sample."""
    grid = PatchGrid(n_h=cfg.n_h, n_v=cfg.n_v,
                     patch_w=cfg.patch_px, patch_h=cfg.patch_px)
    w, h = cfg.image_width, cfg.image_height
    dists = np.empty((cfg.tau_o, cfg.n_patches))
    overlays = np.empty_like(sample.frames)
    gaze_tokens = np.empty(cfg.tau_o, dtype=np.int64)
    for f in range(cfg.tau_o):
        window = _window_for_frame(sample, cfg, f)
        heat = gaussian_splat(window, w, h, cfg.sigma_px)
        if cfg.gaze_dist_source == "binary":
            dist = gaze_distribution(binarize(heat, cfg.binarize_tau), grid)
        else:
            dist = distribution_from_continuous(heat, grid)
        dists[f] = dist.probs
        overlays[f] = overlay(sample.frames[f], heat, cfg.overlay_alpha).pixels
        if window.is_empty:
            gaze_tokens[f] = cfg.n_patches  # "no gaze" row
        else:
            mx = float(np.mean([s.x for s in window.selected]))
            my = float(np.mean([s.y for s in window.selected]))
            col = min(cfg.n_h - 1, max(0, int(mx // cfg.patch_px)))
            row = min(cfg.n_v - 1, max(0, int(my // cfg.patch_px)))
            gaze_tokens[f] = row * cfg.n_h + col
    return dists, overlays, gaze_tokens


def preprocess(sample, cfg, is_train, corrupt_mask=None):
    """SampleInputs for one raw sample under the configured variant."""
    targets = (sample.current_tokens if cfg.task == "activity_understanding"
               else sample.future_tokens)
    if cfg.model == "base":
        return SampleInputs(frames=sample.frames, targets=targets)

    dists, overlays, gaze_tokens = gaze_preprocess(sample, cfg)

    if cfg.query_mode == "gaze-text":
        return SampleInputs(frames=sample.frames, targets=targets,
                            gaze_tokens=gaze_tokens)

    queries = None
    if cfg.query_mode == "overlay":
        queries = overlays.copy()
    elif cfg.query_mode == "rgb":
        queries = sample.frames.copy()
    elif cfg.query_mode == "overlay-train-rgb-test":
        queries = overlays.copy() if is_train else sample.frames.copy()
    # pseudo: queries stay None, the model predicts them

    if queries is not None and corrupt_mask is not None:
        for f in range(cfg.tau_o):
            if corrupt_mask[f]:
                queries[f] = sample.frames[f]

    true_overlays = overlays if uses_pseudo(cfg) else None
    return SampleInputs(frames=sample.frames, targets=targets, queries=queries,
                        gaze_dists=dists, true_overlays=true_overlays)


def _corrupt_mask(cfg, sample_index, p):
    if p <= 0:
        return None
    rng = np.random.default_rng(100003 * (cfg.seed + 1) + 7919 * sample_index)
    return rng.random(cfg.tau_o) < p


# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: ModelState
    log: list
    checkpoint_init: str = ""
    checkpoint_final: str = ""


def load_or_generate(cfg):
    if cfg.dataset_dir:
        splits, _ = synth.load_dataset(cfg.dataset_dir)
        return splits
    return synth.generate(cfg)


def train(cfg, workdir=None, data=None):
    """Train the configured variant; deterministic per (config, seed)."""
    cfg.validate()
    if data is None:
        data = load_or_generate(cfg)
    inputs = [preprocess(s, cfg, is_train=True) for s in data["train"]]
    n = len(inputs)

    state = init_state(cfg)
    result = TrainResult(state=state, log=[])
    workdir = workdir or cfg.out_dir
    if workdir:
        result.checkpoint_init = os.path.join(workdir, "checkpoints", "init")
        save_checkpoint(result.checkpoint_init, state)

    velocity = {k: np.zeros_like(v) for k, v in state.params.items()}
    for step in range(cfg.steps):
        batch = [inputs[(step * cfg.batch_size + j) % n] for j in range(cfg.batch_size)]
        breakdown, caches = batch_loss(state, batch, train=True)
        if not math.isfinite(breakdown.total):
            raise NumericError(f"non-finite loss at step {step}")
        grads = backward_batch(state, batch, caches)
        sgd_step(state, grads, cfg.lr, cfg.momentum, velocity, cfg.grad_clip)
        result.log.append({"step": step, **breakdown.to_dict()})

    if workdir:
        result.checkpoint_final = os.path.join(workdir, "checkpoints", "final")
        save_checkpoint(result.checkpoint_final, state)
        with open(os.path.join(workdir, "training_log.json"), "w") as f:
            json.dump(result.log, f, indent=2, sort_keys=True)
    return result


@dataclass
class EvalReport:
    token_accuracy: float
    sequence_exact_match: float
    rouge_l: dict
    mean_loss: dict
    mean_kl_to_gaze: float
    n_samples: int
    corruption_p: float
    seed: int
    config_hash: str
    per_seed: list = field(default=None)

    def to_dict(self):
        return {
            "token_accuracy": self.token_accuracy,
            "sequence_exact_match": self.sequence_exact_match,
            "rouge_l": self.rouge_l,
            "mean_loss": self.mean_loss,
            "mean_kl_to_gaze": self.mean_kl_to_gaze,
            "n_samples": self.n_samples,
            "corruption_p": self.corruption_p,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "per_seed": self.per_seed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(state_or_dir, samples, cfg, corruption_p=None):
    """Greedy-decoding evaluation of a checkpoint (or in-memory state)."""
    if isinstance(state_or_dir, str):
        state = load_checkpoint(state_or_dir, expected_hash=cfg.train_signature())
    else:
        state = state_or_dir
    p = cfg.corruption_p if corruption_p is None else corruption_p

    token_hits = 0
    token_total = 0
    exact = 0
    rouge_p, rouge_r, rouge_f = [], [], []
    ces, kls, cosines, totals = [], [], [], []
    kl_available = False

    for i, sample in enumerate(samples):
        mask = _corrupt_mask(cfg, i, p)
        inputs = preprocess(sample, cfg, is_train=False, corrupt_mask=mask)
        pred = greedy_decode(state, inputs)
        ref = inputs.targets
        token_hits += int((pred == ref).sum())
        token_total += len(ref)
        exact += int(np.array_equal(pred, ref))
        scores = rouge_l(render_tokens(pred), render_tokens(ref), beta=cfg.rouge_beta)
        rouge_p.append(scores["precision"])
        rouge_r.append(scores["recall"])
        rouge_f.append(scores["f"])
        breakdown, _ = batch_loss(state, [inputs], train=False)
        ces.append(breakdown.ce)
        kls.append(breakdown.kl)
        cosines.append(breakdown.cosine)
        totals.append(breakdown.total)
        if inputs.gaze_dists is not None:
            kl_available = True

    n = len(samples)
    mean_kl = float(np.mean(kls)) if kl_available else None
    return EvalReport(
        token_accuracy=token_hits / token_total,
        sequence_exact_match=exact / n,
        rouge_l={"precision": float(np.mean(rouge_p)),
                 "recall": float(np.mean(rouge_r)),
                 "f": float(np.mean(rouge_f))},
        mean_loss={"ce": float(np.mean(ces)), "kl": float(np.mean(kls)),
                   "cosine": float(np.mean(cosines)), "total": float(np.mean(totals))},
        mean_kl_to_gaze=mean_kl,
        n_samples=n,
        corruption_p=p,
        seed=cfg.seed,
        config_hash=cfg.train_signature(),
    )


def run_experiment(cfg, workdir=None, data=None, eval_split="test"):
    if data is None:
        data = load_or_generate(cfg)
    result = train(cfg, workdir=workdir, data=data)
    target = result.checkpoint_final or result.state
    report = evaluate(target, data[eval_split], cfg)
    if workdir:
        with open(os.path.join(workdir, "eval_report.json"), "w") as f:
            f.write(report.to_json())
    return report, result


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = {
    "lambda": "lambda_",
    "n_blocks": "n_blocks",
    "delta_ms": "delta_ms",
    "query_mode": "query_mode",
    "tau_o": "tau_o",
    "tau_a": "tau_a",
    "overlay_size": "sigma_px",
    "corruption_p": "corruption_p",
}


def sweep(cfg, axis, values, seeds=(0, 1, 2), workdir=None):
    """One train+evaluate per (value, seed); per-run errors are recorded and
    the sweep continues.  The corruption_p axis re-evaluates a shared
    checkpoint per seed instead of retraining."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    field_name = SWEEP_AXES[axis]
    rows = []
    eval_only = axis == "corruption_p"
    trained = {}

    for value in values:
        for seed in seeds:
            row = {"axis": axis, "value": value, "seed": seed}
            try:
                if eval_only:
                    run_cfg = cfg.replace(seed=seed)
                    run_cfg.validate()
                    if seed not in trained:
                        data = load_or_generate(run_cfg)
                        trained[seed] = (train(run_cfg, data=data), data)
                    result, data = trained[seed]
                    report = evaluate(result.state, data["test"], run_cfg,
                                      corruption_p=float(value))
                else:
                    run_cfg = cfg.replace(seed=seed, **{field_name: value})
                    run_cfg.validate()
                    report, _ = run_experiment(run_cfg)
                row.update(
                    token_accuracy=report.token_accuracy,
                    sequence_exact_match=report.sequence_exact_match,
                    rouge_f=report.rouge_l["f"],
                    mean_kl_to_gaze=report.mean_kl_to_gaze,
                    mean_total_loss=report.mean_loss["total"],
                )
            except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)

    if workdir:
        os.makedirs(workdir, exist_ok=True)
        write_sweep_csv(os.path.join(workdir, f"sweep_{axis}.csv"), rows)
        with open(os.path.join(workdir, f"sweep_{axis}.json"), "w") as f:
            json.dump(rows, f, indent=2, sort_keys=True, default=str)
    return rows


def sweep_means(rows, metric="token_accuracy"):
    """Mean metric per axis value over seeds (error rows excluded)."""
    by_value = {}
    for row in rows:
        if "error" in row or row.get(metric) is None:
            continue
        by_value.setdefault(row["value"], []).append(row[metric])
    return {value: float(np.mean(vals)) for value, vals in by_value.items()}


def write_sweep_csv(path, rows):
    fields = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
