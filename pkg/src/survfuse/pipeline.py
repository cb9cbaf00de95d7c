"""Experiment orchestration: splits with audit logging, survival training with
early stopping, checkpoint IO, evaluation reports, the late-fusion baseline
and embedding export."""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import stats as st
from . import tensor as T
from .data import (
    CohortTable,
    cox_design,
    fit_scaler,
    load_clinical_csv,
    preprocess_clinical,
    read_volume,
    write_clinical_csv,
    write_volume,
)
from .config import ModelConfig, RunConfig
from .errors import ConfigError, UndefinedMetricError
from .stats import G_FLOOR
from .survival import SurvivalDistribution, build_time_grid, pmf_from_logits
from .volume import EncoderConfig, VolumeEncoder, fit_histogram_landmarks, preprocess_volume, ssl_pretrain

LATE_FUSION_INDEX_MONTHS = 12.0


def km_median(records):
    """Kaplan-Meier median survival: first time the KM curve reaches 0.5.

    Falls back to the plain median of observed times when the curve never
    crosses 0.5 (heavy censoring)."""
    from .stats import kaplan_meier

    km = kaplan_meier(records)
    below = np.nonzero(km.values <= 0.5)[0]
    if below.size:
        return float(km.times[below[0]])
    return float(np.median([r.time for r in records]))


# ---------------------------------------------------------------------------
# cohort bundles and split auditing


@dataclass
class CohortBundle:
    table: CohortTable
    volumes: list = None
    name: str = "cohort"


def save_cohort_dir(path, bundle, extra_meta=None):
    import os

    os.makedirs(path, exist_ok=True)
    write_clinical_csv(os.path.join(path, "clinical.csv"), bundle.table)
    if bundle.volumes is not None:
        vdir = os.path.join(path, "volumes")
        os.makedirs(vdir, exist_ok=True)
        for pid, vol in zip(bundle.table.ids, bundle.volumes):
            write_volume(os.path.join(vdir, f"{pid}.mmgs"), vol)
    if extra_meta is not None:
        with open(os.path.join(path, "truth.json"), "w", encoding="utf-8") as fh:
            json.dump(extra_meta, fh, sort_keys=True, indent=2)


def load_cohort_dir(path, with_volumes=True, name=None):
    import os

    table = load_clinical_csv(os.path.join(path, "clinical.csv"))
    volumes = None
    vdir = os.path.join(path, "volumes")
    if with_volumes and os.path.isdir(vdir):
        volumes = [read_volume(os.path.join(vdir, f"{pid}.mmgs")) for pid in table.ids]
    return CohortBundle(
        table=table, volumes=volumes, name=name or os.path.basename(str(path).rstrip("/"))
    )


class SplitAudit:
    """Append-only log of which cohort split each pipeline stage touched."""

    def __init__(self):
        self.events = []

    def log(self, stage, split, n):
        self.events.append({"stage": stage, "split": split, "n": int(n)})

    def quarantine_violations(self):
        """Test-split reads by anything other than an evaluation stage."""
        return [
            e
            for e in self.events
            if e["split"] == "test" and not e["stage"].startswith("evaluate")
        ]

    def to_json(self):
        return list(self.events)


class SplitCohort:
    """Cohort plus split membership; all row access goes through view()."""

    def __init__(self, bundle, split_indices, audit):
        self.bundle = bundle
        self.split_indices = {k: np.asarray(v, dtype=np.int64) for k, v in split_indices.items()}
        self.audit = audit

    def view(self, split, stage):
        idx = self.split_indices[split]
        self.audit.log(stage, split, len(idx))
        table = self.bundle.table.subset(idx)
        volumes = None
        if self.bundle.volumes is not None:
            volumes = [self.bundle.volumes[i] for i in idx]
        return table, volumes


def split_sizes(n, split_cfg):
    """Exact split sizes: floor for train, the remainder shared per the
    val/test proportions (378 -> 264/57/57 under the default 70/15/15)."""
    n_train = int(np.floor(n * split_cfg.train))
    rest = n - n_train
    n_val = int(round(rest * split_cfg.val / (split_cfg.val + split_cfg.test)))
    return {"train": n_train, "val": n_val, "test": rest - n_val}


def stratified_split(table, split_cfg, seed):
    """Deterministic 70/15/15 split stratified on (event, survival-time
    quartile) so censoring and survival time stay consistent across splits."""
    n = len(table)
    targets = split_sizes(n, split_cfg)
    qs = np.quantile(table.time, [0.25, 0.5, 0.75])
    quart = np.searchsorted(qs, table.time, side="left")
    strata_key = table.event * 4 + quart
    order = np.argsort(strata_key, kind="stable")

    # members shuffled within each stratum, strata processed in key order
    members = {}
    for i in order:
        members.setdefault(int(strata_key[i]), []).append(int(i))
    out = {"train": [], "val": [], "test": []}
    cum = {"train": 0.0, "val": 0.0}
    assigned = {"train": 0, "val": 0}
    for key in sorted(members):
        rows = np.asarray(members[key])
        rng = np.random.default_rng([seed, 101, key])
        rows = rows[rng.permutation(len(rows))]
        take = {}
        for s in ("train", "val"):
            cum[s] += len(rows) * targets[s] / n
            take[s] = int(round(cum[s])) - assigned[s]
            assigned[s] += take[s]
        overflow = take["train"] + take["val"] - len(rows)
        if overflow > 0:  # tiny stratum; cumulative rounding self-corrects later
            take["val"] -= overflow
            assigned["val"] -= overflow
        out["train"].extend(rows[: take["train"]])
        out["val"].extend(rows[take["train"] : take["train"] + take["val"]])
        out["test"].extend(rows[take["train"] + take["val"] :])
    # cumulative rounding guarantees exact train/val totals; test is the rest
    sizes = {k: len(v) for k, v in out.items()}
    if sizes != targets:
        raise RuntimeError(f"split allocation failed: {sizes} != {targets}")
    return {k: np.asarray(sorted(v), dtype=np.int64) for k, v in out.items()}


# ---------------------------------------------------------------------------
# imaging token preparation


def prepare_imaging_tokens(encoder, volumes, landmarks):
    """Preprocess and encode volumes with a frozen encoder: (n, tokens, d)."""
    out = []
    for vol in volumes:
        pre = preprocess_volume(vol, landmarks)
        out.append(encoder.encode(pre).data)
    return np.stack(out)


def prepare_patches(volumes, landmarks, patch_size):
    """Preprocessed raw patch stacks for end-to-end encoder training."""
    from .volume import extract_patches

    return np.stack(
        [extract_patches(preprocess_volume(v, landmarks), patch_size) for v in volumes]
    )


# ---------------------------------------------------------------------------
# training


def _batch_logits(mdl, x, img_tokens, patches, encoder, idx, dropout_rng=None):
    if mdl.modality == "clinical":
        return mdl.forward(covariates=x[idx], dropout_rng=dropout_rng)
    if patches is not None:  # end-to-end encoder
        tokens = encoder.encode_batch(patches[idx])
    else:
        tokens = T.Tensor(img_tokens[idx])
    if mdl.modality == "imaging":
        return mdl.forward(imaging_tokens=tokens, dropout_rng=dropout_rng)
    return mdl.forward(covariates=x[idx], imaging_tokens=tokens, dropout_rng=dropout_rng)


def _distributions(logits, grid):
    return [pmf_from_logits(row, grid) for row in logits.data]


def train_survival_model(
    split_cohort,
    config,
    modality,
    encoder=None,
    end_to_end=False,
    stage="train",
):
    """Train one survival model on the train split, early-stopping on the
    validation time-dependent concordance. Returns a checkpoint dict."""
    from .survival import total_loss

    if modality not in M.MODALITIES:
        raise ConfigError(f"modality must be one of {M.MODALITIES}")
    needs_imaging = modality in ("imaging", "multimodal")
    if needs_imaging and encoder is None and not end_to_end:
        raise ConfigError("imaging/multimodal training needs a frozen encoder "
                          "checkpoint (or end_to_end=True)")

    tr_table, tr_vols = split_cohort.view("train", stage)
    va_table, va_vols = split_cohort.view("val", stage)
    mc = config.model
    grid = build_time_grid(tr_table.time, mc.bins)
    scaler = fit_scaler(tr_table)
    x_tr, schema = preprocess_clinical(tr_table, scaler)
    x_va, _ = preprocess_clinical(va_table, scaler)
    records_tr = tr_table.records()
    records_va = va_table.records()

    landmarks = None
    img_tr = img_va = patches_tr = patches_va = None
    if needs_imaging:
        if tr_vols is None:
            raise ConfigError("cohort has no volumes")
        if end_to_end:
            landmarks = fit_histogram_landmarks(tr_vols)
            encoder = VolumeEncoder(config.encoder, seed=[config.seed, 7])
            patches_tr = prepare_patches(tr_vols, landmarks, config.encoder.patch_size)
            patches_va = prepare_patches(va_vols, landmarks, config.encoder.patch_size)
        else:
            landmarks = encoder.landmarks
            img_tr = prepare_imaging_tokens(encoder.encoder, tr_vols, landmarks)
            img_va = prepare_imaging_tokens(encoder.encoder, va_vols, landmarks)
            encoder = encoder.encoder

    n_tokens = None
    if needs_imaging:
        n_tokens = encoder.n_tokens
    mdl = M.SurvivalTransformer(
        mc,
        n_covariates=x_tr.shape[1],
        seed=[config.seed, 11],
        n_imaging_tokens=n_tokens,
        modality=modality,
    )
    params = list(mdl.parameters())
    if end_to_end:
        params += encoder.parameters()
    opt = T.Adam(params, lr=mc.learning_rate)
    rng = np.random.default_rng([config.seed, 13])

    def val_ctd():
        logits = _batch_logits(mdl, x_va, img_va, patches_va, encoder, np.arange(len(va_table)))
        dists = _distributions(logits, grid)
        try:
            return st.c_td(dists, records_va)
        except UndefinedMetricError:
            return 0.5

    n_tr = len(tr_table)
    best = {"ctd": -np.inf, "model": mdl.state_dict(), "epoch": -1,
            "encoder": encoder.store.state_dict() if end_to_end else None}
    curve = {"train_loss": [], "val_ctd": []}
    stale = 0
    for epoch in range(mc.epochs):
        perm = rng.permutation(n_tr)
        epoch_loss = 0.0
        for start in range(0, n_tr, mc.batch_size):
            idx = perm[start : start + mc.batch_size]
            if len(idx) < 2:
                continue  # ranking loss needs pairs; fold stragglers into next epoch
            logits = _batch_logits(
                mdl, x_tr, img_tr, patches_tr, encoder, idx,
                dropout_rng=rng if mc.dropout > 0 else None,
            )
            loss = total_loss(
                T.softmax(logits, axis=-1),
                [records_tr[i] for i in idx],
                grid,
                mc.lambda_rank,
                mc.sigma_rank,
            )
            T.backward(loss)
            opt.step()
            epoch_loss += loss.item() * len(idx)
        curve["train_loss"].append(epoch_loss / n_tr)
        ctd = val_ctd()
        curve["val_ctd"].append(ctd)
        if ctd > best["ctd"] + 1e-9:
            best = {
                "ctd": ctd,
                "model": mdl.state_dict(),
                "epoch": epoch,
                "encoder": encoder.store.state_dict() if end_to_end else None,
            }
            stale = 0
        else:
            stale += 1
            if stale >= mc.patience:
                break
    mdl.load_state_dict(best["model"])
    if end_to_end:
        encoder.store.load_state_dict(best["encoder"])
        encoder.freeze()

    threshold = km_median(tr_table.records())
    return {
        "modality": modality,
        "model_state": mdl.state_dict(),
        "model_config": mc,
        "encoder_config": config.encoder if needs_imaging else None,
        "encoder_state": encoder.store.state_dict() if needs_imaging else None,
        "landmarks": landmarks,
        "grid_edges": list(grid.edges),
        "scaler": scaler,
        "schema": schema,
        "threshold_months": threshold,
        "seed": config.seed,
        "split_indices": {k: v.tolist() for k, v in split_cohort.split_indices.items()},
        "training_curve": curve,
        "best_epoch": best["epoch"],
        "end_to_end": bool(end_to_end),
        "n_covariates": x_tr.shape[1],
    }


@dataclass
class FrozenEncoderCheckpoint:
    encoder: VolumeEncoder
    landmarks: np.ndarray
    history: dict = None


def pretrain_encoder(volumes, config):
    """Fit landmarks on the pretraining corpus, preprocess, run SSL."""
    landmarks = fit_histogram_landmarks(volumes)
    pre = [preprocess_volume(v, landmarks) for v in volumes]
    n_hold = max(2, len(pre) // 5)
    enc, history = ssl_pretrain(
        pre[:-n_hold] if len(pre) > 2 * n_hold else pre,
        config.encoder,
        config.ssl,
        seed=config.seed,
        heldout=pre[-n_hold:] if len(pre) > 2 * n_hold else None,
    )
    return FrozenEncoderCheckpoint(encoder=enc, landmarks=landmarks, history=history)


# ---------------------------------------------------------------------------
# prediction and evaluation


def _rebuild_model(ckpt):
    mdl = M.SurvivalTransformer(
        ckpt["model_config"],
        n_covariates=ckpt["n_covariates"],
        seed=0,
        modality=ckpt["modality"],
    )
    mdl.load_state_dict(ckpt["model_state"])
    encoder = None
    if ckpt["encoder_state"] is not None:
        encoder = VolumeEncoder(ckpt["encoder_config"], seed=0)
        encoder.store.load_state_dict(ckpt["encoder_state"])
        encoder.freeze()
    return mdl, encoder


def predict_distributions(ckpt, table, volumes):
    """Per-patient SurvivalDistribution list for a cohort."""
    from .survival import TimeGrid

    mdl, encoder = _rebuild_model(ckpt)
    grid = TimeGrid(tuple(ckpt["grid_edges"]))
    x, _ = preprocess_clinical(table, ckpt["scaler"])
    img = None
    if mdl.modality != "clinical":
        if volumes is None:
            raise ConfigError("checkpoint needs imaging volumes")
        img = prepare_imaging_tokens(encoder, volumes, ckpt["landmarks"])
    logits = _batch_logits(mdl, x, img, None, None, np.arange(len(table)))
    return _distributions(logits, grid)


def predict_monthly(ckpt, table, volumes, horizon=None):
    """JSON-ready per-patient monthly survival curves."""
    dists = predict_distributions(ckpt, table, volumes)
    grid_top = max(ckpt["grid_edges"])
    months = np.arange(0, int(np.ceil(horizon or grid_top)) + 1, dtype=np.float64)
    out = []
    for pid, dist in zip(table.ids, dists):
        out.append(
            {
                "id": pid,
                "months": [float(m) for m in months],
                "survival": [float(v) for v in dist.survival_at(months)],
            }
        )
    return out


def _ibs_matrix(s_matrix, times, events, ts, idx):
    """Vectorized IPCW integrated Brier score on a resample (bootstrap path)."""
    t_r = times[idx]
    e_r = events[idx]
    s = s_matrix[idx]
    from .survival import records_from_arrays

    g = st.censoring_km(records_from_arrays(t_r, e_r))
    g_at = np.asarray(g.survival_at(ts), dtype=np.float64)
    g_before = np.asarray(g.survival_before(t_r), dtype=np.float64)
    dead = (t_r[:, None] <= ts[None, :]) & (e_r[:, None] == 1)
    alive = t_r[:, None] > ts[None, :]
    w_dead = np.where(g_before[:, None] >= G_FLOOR, 1.0 / np.maximum(g_before[:, None], G_FLOOR), 0.0)
    w_alive = np.where(g_at[None, :] >= G_FLOOR, 1.0 / np.maximum(g_at[None, :], G_FLOOR), 0.0)
    contrib = dead * (s**2) * w_dead + alive * ((1.0 - s) ** 2) * w_alive
    usable = ~(
        (dead & (g_before[:, None] < G_FLOOR)) | (alive & (g_at[None, :] < G_FLOOR))
    )
    counts = usable.sum(axis=0)
    scores = np.where(counts > 0, contrib.sum(axis=0) / np.maximum(counts, 1), 0.0)
    return st.trapezoid_mean(ts, scores)


def evaluate_cohort(ckpt, table, volumes, n_boot, seed):
    """Metric entry for one cohort: Ctd and IBS with bootstrap CIs, the
    logrank split at the training-median threshold."""
    dists = predict_distributions(ckpt, table, volumes)
    records = table.records()
    times = np.asarray(table.time)
    events = np.asarray(table.event)
    n = len(table)

    ctd_point = st.c_td(dists, records)
    s_eval = np.stack([d.survival_at(times) for d in dists])
    ctd_ci = st.bootstrap_ci(
        lambda idx: st.c_td_from_matrix(s_eval[np.ix_(idx, idx)], times[idx], events[idx]),
        n, n_boot, seed,
    )

    t_max = float(np.ceil(max(ckpt["grid_edges"])))
    ts = np.arange(0.0, t_max + 0.5, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ibs_point = st.integrated_brier(dists, records, t_max)
    s_matrix = np.stack([d.survival_at(ts) for d in dists])
    ibs_ci = st.bootstrap_ci(
        lambda idx: _ibs_matrix(s_matrix, times, events, ts, idx), n, n_boot, seed + 1
    )

    threshold = float(ckpt["threshold_months"])
    labels = st.dichotomize(dists, threshold)
    fav = [r for r, lab in zip(records, labels) if lab == "favorable"]
    unfav = [r for r, lab in zip(records, labels) if lab == "unfavorable"]
    if fav and unfav:
        try:
            logrank_p = st.logrank(fav, unfav).p_value
        except UndefinedMetricError:
            logrank_p = None
    else:
        logrank_p = None

    return {
        "ctd": float(ctd_point),
        "ctd_ci": [ctd_ci["lo"], ctd_ci["hi"]],
        "ibs": float(ibs_point),
        "ibs_ci": [ibs_ci["lo"], ibs_ci["hi"]],
        "logrank_p": logrank_p,
        "threshold_months": threshold,
        "n": n,
        "seed": seed,
    }


def evaluate_checkpoint(ckpt, split_cohort, externals=(), n_boot=1000, seed=0):
    """Evaluate on the held-out test split plus any external cohorts."""
    report = {"seed": seed, "threshold_months": float(ckpt["threshold_months"]), "cohorts": {}}
    if split_cohort is not None:
        te_table, te_vols = split_cohort.view("test", "evaluate")
        report["cohorts"]["internal"] = evaluate_cohort(ckpt, te_table, te_vols, n_boot, seed)
    for bundle in externals:
        report["cohorts"][bundle.name] = evaluate_cohort(
            ckpt, bundle.table, bundle.volumes, n_boot, seed
        )
    return report


def report_to_json(report):
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# baselines


def cox_clinical_baseline(split_cohort, n_boot=1000, seed=0):
    """Conventional Cox model on the clinical covariates alone."""
    tr_table, _ = split_cohort.view("train", "train-cox")
    scaler = fit_scaler(tr_table)
    x_tr, schema = cox_design(tr_table, scaler)
    fit = st.fit_coxph(x_tr, tr_table.records())
    te_table, _ = split_cohort.view("test", "evaluate-cox")
    x_te, _ = cox_design(te_table, scaler)
    curves = fit.survival_curves(x_te)
    records = te_table.records()
    return {
        "ctd": st.c_td(curves, records),
        "ibs": st.integrated_brier(curves, records, float(np.ceil(tr_table.time.max()))),
        "schema": schema,
        "fit_beta": fit.beta.tolist(),
    }


def late_fusion_baseline(split_cohort, config, encoder_ckpt, n_boot=200):
    """Image-only survival model -> scalar prognostic index -> CoxPH on
    [index + clinical covariates], evaluated from the Cox predicted curves."""
    img_ckpt = train_survival_model(
        split_cohort, config, "imaging", encoder=encoder_ckpt, stage="train-latefusion"
    )

    def index_for(table, volumes):
        dists = predict_distributions(img_ckpt, table, volumes)
        return np.array(
            [-float(d.survival_at(LATE_FUSION_INDEX_MONTHS)) for d in dists]
        )

    tr_table, tr_vols = split_cohort.view("train", "train-latefusion")
    scaler = fit_scaler(tr_table)
    x_tr, schema = cox_design(tr_table, scaler)
    design_tr = np.column_stack([x_tr, index_for(tr_table, tr_vols)])
    fit = st.fit_coxph(design_tr, tr_table.records())

    te_table, te_vols = split_cohort.view("test", "evaluate-latefusion")
    x_te, _ = cox_design(te_table, scaler)
    design_te = np.column_stack([x_te, index_for(te_table, te_vols)])
    curves = fit.survival_curves(design_te)
    records = te_table.records()
    times = np.asarray(te_table.time)
    events = np.asarray(te_table.event)

    ctd_point = st.c_td(curves, records)
    s_eval = np.stack([np.asarray(c.survival_at(times), dtype=np.float64) for c in curves])
    ctd_ci = st.bootstrap_ci(
        lambda idx: st.c_td_from_matrix(s_eval[np.ix_(idx, idx)], times[idx], events[idx]),
        len(te_table), n_boot, config.seed,
    )
    t_max = float(np.ceil(tr_table.time.max()))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ibs_point = st.integrated_brier(curves, records, t_max)

    threshold = km_median(tr_table.records())
    labels = st.dichotomize(curves, threshold)
    fav = [r for r, lab in zip(records, labels) if lab == "favorable"]
    unfav = [r for r, lab in zip(records, labels) if lab == "unfavorable"]
    logrank_p = (
        st.logrank(fav, unfav).p_value if fav and unfav else None
    )

    report = {
        "ctd": float(ctd_point),
        "ctd_ci": [ctd_ci["lo"], ctd_ci["hi"]],
        "ibs": float(ibs_point),
        "ibs_ci": None,
        "logrank_p": logrank_p,
        "threshold_months": threshold,
        "n": len(te_table),
        "seed": config.seed,
        "index_z": float(fit.z_scores()[-1]),
        "schema": schema + ["image_index"],
    }
    return report, fit


def export_embeddings(ckpt, table, volumes, path):
    """CSV of pooled fused embeddings with MGMT and resection labels."""
    mdl, encoder = _rebuild_model(ckpt)
    x, _ = preprocess_clinical(table, ckpt["scaler"])
    img = None
    if mdl.modality != "clinical":
        img = prepare_imaging_tokens(encoder, volumes, ckpt["landmarks"])
    if mdl.modality == "clinical":
        pooled = mdl.pooled_representation(covariates=x)
    elif mdl.modality == "imaging":
        pooled = mdl.pooled_representation(imaging_tokens=T.Tensor(img))
    else:
        pooled = mdl.pooled_representation(covariates=x, imaging_tokens=T.Tensor(img))
    d = pooled.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["id"] + [f"e{i}" for i in range(d)] + ["mgmt", "resection"]) + "\n")
        for i, pid in enumerate(table.ids):
            vals = ",".join(repr(float(v)) for v in pooled.data[i])
            fh.write(f"{pid},{vals},{table.mgmt[i]},{table.resection[i]}\n")
    return d


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(path, ckpt):
    arrays = {}
    for key, val in ckpt["model_state"].items():
        arrays[f"model/{key}"] = val
    if ckpt["encoder_state"] is not None:
        for key, val in ckpt["encoder_state"].items():
            arrays[f"encoder/{key}"] = val
    if ckpt["landmarks"] is not None:
        arrays["landmarks"] = np.asarray(ckpt["landmarks"])
    meta = {
        "modality": ckpt["modality"],
        "model_config": vars(ckpt["model_config"]),
        "encoder_config": (
            None
            if ckpt["encoder_config"] is None
            else dict(vars(ckpt["encoder_config"]), dims=list(ckpt["encoder_config"].dims))
        ),
        "grid_edges": ckpt["grid_edges"],
        "scaler": ckpt["scaler"],
        "schema": ckpt["schema"],
        "threshold_months": ckpt["threshold_months"],
        "seed": ckpt["seed"],
        "split_indices": ckpt["split_indices"],
        "training_curve": ckpt["training_curve"],
        "best_epoch": ckpt["best_epoch"],
        "end_to_end": ckpt["end_to_end"],
        "n_covariates": ckpt["n_covariates"],
    }
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta_json"]).decode("utf-8"))
        model_state = {
            k[len("model/") :]: z[k] for k in z.files if k.startswith("model/")
        }
        encoder_state = {
            k[len("encoder/") :]: z[k] for k in z.files if k.startswith("encoder/")
        }
        landmarks = z["landmarks"] if "landmarks" in z.files else None
    enc_cfg = meta["encoder_config"]
    return {
        "modality": meta["modality"],
        "model_state": model_state,
        "model_config": ModelConfig(**meta["model_config"]),
        "encoder_config": (
            None if enc_cfg is None else EncoderConfig(**dict(enc_cfg, dims=tuple(enc_cfg["dims"])))
        ),
        "encoder_state": encoder_state or None,
        "landmarks": landmarks,
        "grid_edges": meta["grid_edges"],
        "scaler": meta["scaler"],
        "schema": meta["schema"],
        "threshold_months": meta["threshold_months"],
        "seed": meta["seed"],
        "split_indices": meta["split_indices"],
        "training_curve": meta["training_curve"],
        "best_epoch": meta["best_epoch"],
        "end_to_end": meta["end_to_end"],
        "n_covariates": meta["n_covariates"],
    }


def save_encoder_checkpoint(path, enc_ckpt):
    arrays = {f"encoder/{k}": v for k, v in enc_ckpt.encoder.store.state_dict().items()}
    arrays["landmarks"] = np.asarray(enc_ckpt.landmarks)
    cfg = enc_ckpt.encoder.config
    meta = {
        "config": dict(vars(cfg), dims=list(cfg.dims)),
        "history": enc_ckpt.history,
    }
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_encoder_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta_json"]).decode("utf-8"))
        state = {k[len("encoder/") :]: z[k] for k in z.files if k.startswith("encoder/")}
        landmarks = z["landmarks"]
    cfg = EncoderConfig(**dict(meta["config"], dims=tuple(meta["config"]["dims"])))
    enc = VolumeEncoder(cfg, seed=0)
    enc.store.load_state_dict(state)
    enc.freeze()
    return FrozenEncoderCheckpoint(encoder=enc, landmarks=landmarks, history=meta["history"])


# ---------------------------------------------------------------------------
# full pipeline driver


def run_pipeline(config, workdir=None, modality="multimodal"):
    """simulate -> pretrain -> train -> evaluate, in memory, fully seeded.

    Returns (report_json_bytes, audit, checkpoint).
    """
    from .synth import generate_synthetic_cohort

    cohort = generate_synthetic_cohort(
        config.seed,
        config.simulate.n,
        {
            "beta_clinical": config.simulate.beta_clinical,
            "beta_image": config.simulate.beta_image,
            "beta_interaction": config.simulate.beta_interaction,
        },
        config.simulate.censor_rate,
        dims=tuple(config.encoder.dims),
    )
    bundle = CohortBundle(table=cohort.table, volumes=cohort.volumes, name="synthetic")
    audit = SplitAudit()
    splits = stratified_split(bundle.table, config.split, config.seed)
    sc = SplitCohort(bundle, splits, audit)

    encoder_ckpt = None
    if modality in ("imaging", "multimodal"):
        tr_table, tr_vols = sc.view("train", "pretrain")
        encoder_ckpt = pretrain_encoder(tr_vols, config)
    ckpt = train_survival_model(sc, config, modality, encoder=encoder_ckpt)
    report = evaluate_checkpoint(ckpt, sc, n_boot=config.bootstrap, seed=config.seed)
    report["audit"] = audit.to_json()
    return report_to_json(report).encode("utf-8"), audit, ckpt
