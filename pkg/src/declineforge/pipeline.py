"""Pipeline stages over a workspace directory.

Each stage reads its upstream artifacts from disk, writes its own
subdirectory and records completion in the run manifest.
"""

import logging
import shutil
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import gbt, plots
from .augment import make_training_set, paired_targets
from .config import PipelineConfig, config_hash
from .errors import DeclineForgeError, DependencyError, WorkspaceError
from .manifest import MANIFEST_FILE, STAGES, RunManifest
from .metrics import (
    CLASS_NAMES,
    ComparisonTable,
    HeldOutScorer,
    aggregate_runs,
    pca_fit,
    pca_transform,
)
from .models import (
    ViTAutoencoder,
    build_vit,
    embeddings_from_frame,
    embeddings_to_frame,
    extract_embeddings,
    pretrain_reconstruction,
    train_cnn_baseline,
    train_fc_head,
    train_tabular_autoencoder,
)
from .nncore import load_checkpoint, save_checkpoint
from .observability import PipelineMetrics
from .synthcohort import (
    FEATURE_GROUP_INDEX,
    SplitSpec,
    gen_tabular,
    gen_trajectories,
    gen_volumes,
    read_tabular_csv,
    read_trajectories_csv,
    read_truth_csv,
    strata_subjects,
    stratified_split,
    write_tabular_csv,
    write_trajectories_csv,
    write_truth_csv,
)
from .trajectory import ProgressionLabel, assign_labels, cluster_summary, elbow_curve, kmeans_dtw
from .volio import Volume, load_volume, save_volume

logger = logging.getLogger(__name__)

TITLE_TO_LABEL = {label.title: label for label in ProgressionLabel}
TABULAR_TABLE = "Tabular feature sets (AE + GBT), one-vs-rest AUC"
METHODS_TABLE = "Imaging methods, one-vs-rest AUC"
BRAIN_VOLUMETRICS_ROW = "Brain Volumetrics (AE + GBT)"
VIT_GBT_ROW = "ViT + PCA + GBT"
VIT_FC_ROW = "ViT + FC"
CNN_ROWS = {"two_rate": "CNN (two-rate)", "single_rate": "CNN (single-rate)"}


@dataclass
class Context:
    cfg: PipelineConfig
    force: bool = False
    metrics: PipelineMetrics = field(default_factory=PipelineMetrics)

    @property
    def workspace(self) -> Path:
        return Path(self.cfg.paths.workspace)

    def path(self, stage: str, name: str = "") -> Path:
        return self.workspace / stage / name if name else self.workspace / stage


StageBody = Callable[[Context, Path], Tuple[Dict[str, str], Optional[int]]]


def _run_stage(ctx: Context, stage: str, body: StageBody) -> RunManifest:
    ws = ctx.workspace
    ws.mkdir(parents=True, exist_ok=True)
    had_manifest = (ws / MANIFEST_FILE).exists()
    manifest = RunManifest.open(ws, config_hash(ctx.cfg), ctx.force)
    out_dir = ctx.path(stage)
    with ctx.metrics.stage(stage):
        manifest.begin(stage, ctx.force)
        if out_dir.exists() and any(out_dir.iterdir()):
            if not had_manifest and not ctx.force:
                raise WorkspaceError(f"{out_dir} already holds outputs; use --force to overwrite")
            logger.info("clearing previous outputs in %s", out_dir)
            shutil.rmtree(out_dir)
        manifest.save(ws)
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.info("stage %s: start", stage)
        outputs, seed = body(ctx, out_dir)
        manifest.complete(stage, {k: str(Path(v).relative_to(ws)) for k, v in outputs.items()}, seed)
        manifest.save(ws)
    ctx.metrics.write(ws)
    logger.info("stage %s: done", stage)
    return manifest


# Artifact readers


def _read_truth(ctx: Context) -> "OrderedDict[str, int]":
    return read_truth_csv(ctx.path("synth", "truth.csv"))


def _load_volumes(ctx: Context, ids: Sequence[str]) -> List[Volume]:
    return [load_volume(ctx.path("synth", f"volumes/{sid}.nii")) for sid in ids]


def read_labels(path: Path) -> "OrderedDict[str, ProgressionLabel]":
    frame = pd.read_csv(path, dtype={"subject_id": str})
    return OrderedDict((str(s), TITLE_TO_LABEL[lab]) for s, lab in zip(frame["subject_id"], frame["label"]))


def read_split(path: Path) -> SplitSpec:
    return SplitSpec.from_frame(pd.read_csv(path, dtype={"subject_id": str}))


# Stages


def _synth(ctx: Context, out: Path):
    spec = ctx.cfg.cohort
    pairs = gen_trajectories(spec)
    groups = OrderedDict((t.subject_id, g) for t, g in pairs)
    records = gen_tabular(groups, spec)
    volumes = gen_volumes(groups, spec)
    write_trajectories_csv([t for t, _ in pairs], out / "trajectories.csv")
    write_tabular_csv(records, out / "tabular.csv")
    write_truth_csv(groups, out / "truth.csv")
    vol_dir = out / "volumes"
    vol_dir.mkdir()
    for sid, volume in zip(groups, volumes):
        save_volume(volume, vol_dir / f"{sid}.nii")
    logger.info("synthesized %d subjects", len(groups))
    outputs = {
        "trajectories": out / "trajectories.csv",
        "tabular": out / "tabular.csv",
        "truth": out / "truth.csv",
        "volumes": vol_dir,
    }
    return outputs, spec.seed


def _cluster(ctx: Context, out: Path):
    c = ctx.cfg.clustering
    trajectories = read_trajectories_csv(ctx.path("synth", "trajectories.csv"))
    k_max = min(c.k_max, len(trajectories))
    curve = elbow_curve(
        trajectories, k_max, restarts=c.restarts, seed=c.seed, max_iter=c.max_iter,
        cfg=c.dtw, dba_iterations=c.dba_iterations,
    )
    model = kmeans_dtw(
        trajectories, c.k, restarts=c.restarts, max_iter=c.max_iter, seed=c.seed,
        cfg=c.dtw, dba_iterations=c.dba_iterations,
    )
    labels = assign_labels(model)

    pd.DataFrame(curve, columns=["k", "inertia"]).to_csv(out / "elbow.csv", index=False)
    pd.DataFrame(
        [(sid, cluster, labels[sid].title) for sid, cluster in model.assignments.items()],
        columns=["subject_id", "cluster", "label"],
    ).to_csv(out / "assignments.csv", index=False)
    order = model.label_order
    pd.DataFrame(
        [
            (cluster, ProgressionLabel(order[cluster]).title, i, float(v))
            for cluster, bary in enumerate(model.barycenters)
            for i, v in enumerate(bary)
        ],
        columns=["cluster", "label", "index", "value"],
    ).to_csv(out / "barycenters.csv", index=False)
    records = read_tabular_csv(ctx.path("synth", "tabular.csv"))
    cluster_summary(labels, trajectories, records).to_csv(out / "cluster_summary.csv", index=False)
    plots.write_text(out / "elbow.svg", plots.elbow_svg(curve, c.k))
    plots.write_text(out / "trajectories.svg", plots.trajectories_svg(model, trajectories, labels))
    logger.info("clustered %d trajectories into k=%d (inertia %.4f)", len(trajectories), c.k, model.inertia)
    outputs = {
        "assignments": out / "assignments.csv",
        "barycenters": out / "barycenters.csv",
        "elbow": out / "elbow.csv",
        "summary": out / "cluster_summary.csv",
    }
    return outputs, c.seed


def _strata_frame(subjects, split: SplitSpec) -> pd.DataFrame:
    ages = np.array([s.age for s in subjects])
    edges = np.quantile(ages, [0.25, 0.5, 0.75])
    frame = pd.DataFrame(
        {
            "partition": [split.partition_of(s.subject_id) for s in subjects],
            "age_quartile": np.digitize(ages, edges),
            "sex": [s.sex for s in subjects],
            "group": [s.group for s in subjects],
        }
    )
    return frame.groupby(["age_quartile", "sex", "group", "partition"]).size().unstack(fill_value=0).reset_index()


def _split(ctx: Context, out: Path):
    ev = ctx.cfg.evaluation
    records = read_tabular_csv(ctx.path("synth", "tabular.csv"))
    subjects = strata_subjects(records, _read_truth(ctx))
    split = stratified_split(subjects, ev.test_ratio, ev.seed)
    split.to_frame().to_csv(out / "split.csv", index=False)
    _strata_frame(subjects, split).to_csv(out / "strata.csv", index=False)
    return {"split": out / "split.csv", "strata": out / "strata.csv"}, ev.seed


def _monitor_ids(ids: Sequence[str], size: int, seed: int) -> List[str]:
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(ids), size=min(size, max(1, len(ids) - 1)), replace=False)
    return [ids[i] for i in sorted(picked)]


def _pretrain(ctx: Context, out: Path):
    pre = ctx.cfg.pretraining
    ids = list(_read_truth(ctx))
    volumes = dict(zip(ids, _load_volumes(ctx, ids)))
    monitor = _monitor_ids(ids, pre.monitor_size, pre.train.seed)
    train_ids = [s for s in ids if s not in set(monitor)]
    originals = [volumes[s] for s in train_ids]
    inputs = make_training_set(originals, ctx.cfg.augmentation, pre.copies_per_volume)
    targets = paired_targets(originals, pre.copies_per_volume) if pre.clean_targets else None

    model = build_vit(pre.vit, seed=pre.train.seed)
    history = pretrain_reconstruction(
        model, inputs, pre.train, targets=targets,
        monitor=[volumes[s] for s in monitor],
        on_epoch=ctx.metrics.epoch_counter("vit"),
    )
    save_checkpoint(model, out / "vit.ckpt")
    history.to_frame().to_csv(out / "history.csv", index=False)
    plots.write_text(out / "recon.svg", plots.recon_svg(history))
    pd.DataFrame({"subject_id": monitor}).to_csv(out / "monitor.csv", index=False)
    return {"checkpoint": out / "vit.ckpt", "history": out / "history.csv"}, pre.train.seed


def load_encoder(ctx: Context):
    model = build_vit(ctx.cfg.pretraining.vit, seed=ctx.cfg.pretraining.train.seed)
    state = load_checkpoint(ctx.path("pretrain", "vit.ckpt"))
    model.load_state_dict(state)
    model.eval()
    return model


def _embed(ctx: Context, out: Path):
    ids = list(_read_truth(ctx))
    model = load_encoder(ctx)
    embeddings = extract_embeddings(model, _load_volumes(ctx, ids), ids)
    embeddings_to_frame(embeddings).to_csv(out / "embeddings.csv", index=False)
    return {"embeddings": out / "embeddings.csv"}, None


@dataclass
class _EvalData:
    labels: Mapping[str, int]
    records: list
    embeddings: Dict[str, np.ndarray]
    volumes: Dict[str, Volume]
    encoder: ViTAutoencoder


def _repetition_seeds(seed: int, repetitions: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(repetitions)]


def _gbt_probs(train_x, train_y, test_x, seed: int, ctx: Context) -> np.ndarray:
    params = ctx.cfg.classifiers.gbt.model_copy(update={"seed": seed})
    model = gbt.fit_gbt(train_x, train_y, params)
    return gbt.predict_proba(model, test_x)


def _evaluate_repetition(ctx: Context, data: _EvalData, split: SplitSpec, seed: int) -> Dict[str, list]:
    """AUCs per method for one repetition; test labels are only seen by the scorer."""
    cls = ctx.cfg.classifiers
    train_ids, test_ids = list(split.train_ids), list(split.test_ids)
    train_y = np.array([data.labels[s] for s in train_ids])
    scorer = HeldOutScorer([data.labels[s] for s in test_ids])
    results: Dict[str, list] = OrderedDict()

    for group in cls.feature_groups:
        ae_cfg = cls.tabular_ae.model_copy(update={"seed": seed})
        latents = train_tabular_autoencoder(data.records, group, ae_cfg, train_ids).latents
        probs = _gbt_probs(
            np.vstack([latents[s] for s in train_ids]), train_y,
            np.vstack([latents[s] for s in test_ids]), seed, ctx,
        )
        results[FEATURE_GROUP_INDEX[group].label] = scorer.score(probs)

    train_z = np.vstack([data.embeddings[s] for s in train_ids])
    test_z = np.vstack([data.embeddings[s] for s in test_ids])
    pca = pca_fit(train_z, ctx.cfg.reduction.variance_target, ctx.cfg.reduction.max_components)
    if pca.n_components > 0:
        train_p, test_p = pca_transform(pca, train_z), pca_transform(pca, test_z)
    else:
        train_p, test_p = train_z, test_z
    results[VIT_GBT_ROW] = scorer.score(_gbt_probs(train_p, train_y, test_p, seed, ctx))

    fc = train_fc_head(
        data.encoder, [data.volumes[s] for s in train_ids], train_y,
        cls.fc_head.model_copy(update={"seed": seed}),
        val_volumes=[data.volumes[s] for s in test_ids], hidden=cls.fc_hidden,
        on_epoch=ctx.metrics.epoch_counter("fc_head"),
    )
    results[VIT_FC_ROW] = scorer.score(fc.val_probabilities)

    for variant in cls.cnn_variants:
        cnn_cfg = cls.cnn.model_copy(update={"variant": variant})
        classifier = train_cnn_baseline(
            [data.volumes[s] for s in train_ids], train_y,
            cls.cnn_train.model_copy(update={"seed": seed}), cnn_cfg,
            on_epoch=ctx.metrics.epoch_counter(f"cnn_{variant}"),
        )
        results[CNN_ROWS[variant]] = scorer.score(classifier.predict_proba([data.volumes[s] for s in test_ids]))
    return results


def _evaluate(ctx: Context, out: Path):
    ev = ctx.cfg.evaluation
    labels = {s: int(lab) for s, lab in read_labels(ctx.path("cluster", "assignments.csv")).items()}
    ids = list(_read_truth(ctx))
    data = _EvalData(
        labels=labels,
        records=read_tabular_csv(ctx.path("synth", "tabular.csv")),
        embeddings={e.subject_id: e.vector for e in embeddings_from_frame(
            pd.read_csv(ctx.path("embed", "embeddings.csv"), dtype={"subject_id": str}))},
        volumes=dict(zip(ids, _load_volumes(ctx, ids))),
        encoder=load_encoder(ctx),
    )
    fixed_split = read_split(ctx.path("split", "split.csv"))
    subjects = strata_subjects(data.records, _read_truth(ctx)) if ev.resplit else None

    runs: Dict[str, List[list]] = OrderedDict()
    rows = []
    for rep, seed in enumerate(_repetition_seeds(ev.seed, ev.repetitions)):
        split = stratified_split(subjects, ev.test_ratio, seed) if ev.resplit else fixed_split
        logger.info("evaluation repetition %d/%d (seed %d)", rep + 1, ev.repetitions, seed)
        for method, aucs in _evaluate_repetition(ctx, data, split, seed).items():
            runs.setdefault(method, []).append(aucs)
            rows.extend((method, rep, cls_name, auc) for cls_name, auc in zip(CLASS_NAMES, aucs))

    tabular = ComparisonTable(TABULAR_TABLE)
    methods = ComparisonTable(METHODS_TABLE)
    group_labels = {FEATURE_GROUP_INDEX[g].label for g in ctx.cfg.classifiers.feature_groups}
    for method, per_run in runs.items():
        report = aggregate_runs(per_run)
        (tabular if method in group_labels else methods).add(method, report)
    brain = FEATURE_GROUP_INDEX["brain_volumetrics"].label
    if brain in tabular.rows:
        methods.add(BRAIN_VOLUMETRICS_ROW, tabular.rows[brain])

    pd.DataFrame(rows, columns=["method", "repetition", "class", "auc"]).to_csv(out / "runs.csv", index=False)
    tabular.to_frame().to_csv(out / "tabular_auc.csv", index=False)
    methods.to_frame().to_csv(out / "methods_auc.csv", index=False)
    plots.write_text(out / "report.txt", render_report(tabular, methods))
    outputs = {
        "runs": out / "runs.csv",
        "tabular": out / "tabular_auc.csv",
        "methods": out / "methods_auc.csv",
        "report": out / "report.txt",
    }
    return outputs, ev.seed


def render_report(tabular: ComparisonTable, methods: ComparisonTable) -> str:
    return plots.report_table(tabular) + "\n" + plots.report_table(methods)


# Commands


def cmd_synth(ctx: Context) -> RunManifest:
    return _run_stage(ctx, "synth", _synth)


def cmd_cluster(ctx: Context) -> RunManifest:
    return _run_stage(ctx, "cluster", _cluster)


def cmd_split(ctx: Context) -> RunManifest:
    return _run_stage(ctx, "split", _split)


def cmd_pretrain(ctx: Context) -> RunManifest:
    return _run_stage(ctx, "pretrain", _pretrain)


def cmd_embed(ctx: Context) -> RunManifest:
    return _run_stage(ctx, "embed", _embed)


def cmd_evaluate(ctx: Context) -> RunManifest:
    return _run_stage(ctx, "evaluate", _evaluate)


COMMANDS = {
    "synth": cmd_synth,
    "cluster": cmd_cluster,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "evaluate": cmd_evaluate,
}


def cmd_run_all(ctx: Context) -> List[str]:
    """Run every incomplete stage in order; returns the stages that ran."""
    ws = ctx.workspace
    ws.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.open(ws, config_hash(ctx.cfg), ctx.force)
    if manifest.all_complete() and not ctx.force:
        logger.info("workspace %s is up to date", ws)
        return []
    ran = []
    for stage in STAGES:
        if manifest.is_complete(stage) and not ctx.force:
            logger.info("stage %s: up to date", stage)
            ctx.metrics.skipped(stage)
            continue
        try:
            manifest = COMMANDS[stage](ctx)
        except DeclineForgeError as exc:
            exc.failed_stage = stage
            logger.error("stage %s failed: %s", stage, exc)
            raise
        ran.append(stage)
    return ran


def cmd_report(ctx: Context) -> str:
    manifest = RunManifest.open(ctx.workspace, config_hash(ctx.cfg), force=False)
    if not manifest.is_complete("evaluate"):
        raise DependencyError("evaluate", needed_by="report")
    tabular = ComparisonTable.from_frame(TABULAR_TABLE, pd.read_csv(ctx.path("evaluate", "tabular_auc.csv")))
    methods = ComparisonTable.from_frame(METHODS_TABLE, pd.read_csv(ctx.path("evaluate", "methods_auc.csv")))
    text = render_report(tabular, methods)
    plots.write_text(ctx.path("evaluate", "report.txt"), text)
    return text
