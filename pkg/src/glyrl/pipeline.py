"""Stage orchestration: cohort CSV in, calibrated policy report out.

Each stage is a function over an artifacts directory: it reads the files
earlier stages wrote and writes its own, so the CLI subcommands and
run_pipeline are the same code path.  Every byte written is a pure
function of (config, master seed, input CSV); reruns must reproduce
artifacts exactly, which the manifest's checksums make checkable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import calib
from .cluster import ClusterModel, assign_many, kmeans_fit, load_clusters, save_clusters
from .cohort import (
    NormalizationSpec,
    NormalizedSeries,
    PatientSeries,
    annotate_diabetes,
    apply_normalization,
    filter_cohort,
    fit_normalization,
    impute_cohort,
    parse_cohort,
    split_patients,
    write_cohort,
    FilterCriteria,
)
from .config import PipelineConfig
from .encoder import (
    SparsityConfig,
    TrainConfig,
    encode,
    load_encoder,
    save_encoder,
    train,
)
from .errors import ArtifactError, ConfigError, DataError, GlyrlError, NumericalError
from .mdp import (
    ActionSpace,
    AssignedSeries,
    MDPModel,
    build_trajectories,
    estimate_mdp,
    extract_real_policy,
    load_mdp,
    read_trajectories,
    save_mdp,
    write_trajectories,
)
from .solver import (
    PolicySolution,
    policy_evaluation,
    policy_iteration,
    q_from_v,
    read_solution,
    write_q_table,
    write_solution,
)

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "glyrl-manifest"
MANIFEST_FORMAT_VERSION = 1

STAGE_ORDER = ("ingest", "train-encoder", "cluster", "build-mdp",
               "solve", "calibrate", "evaluate")


def derive_seed(master: int, stream: str) -> int:
    """Stable per-stage substream seed from the master seed and a name."""
    digest = hashlib.sha256(("%d/%s" % (master, stream)).encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: str, doc: dict) -> None:
    _write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _read_json(path: str, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError("cannot read %s %s: %s" % (what, path, exc))


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# --- manifest ----------------------------------------------------------------


def _manifest_path(art_dir: str) -> str:
    return os.path.join(art_dir, "manifest.json")


def _manifest_read(art_dir: str) -> dict:
    path = _manifest_path(art_dir)
    if not os.path.exists(path):
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_FORMAT_VERSION,
            "stages": {},
        }
    doc = _read_json(path, "manifest")
    if doc.get("format") != MANIFEST_FORMAT:
        raise ArtifactError("%s is not a pipeline manifest" % path)
    return doc


def _manifest_record(art_dir: str, config: PipelineConfig, stage: str,
                     files: Sequence[str], extra: Optional[dict] = None) -> None:
    doc = _manifest_read(art_dir)
    doc["config_digest"] = config.digest()
    doc["seed"] = config.seed
    if extra:
        doc.update(extra)
    doc["stages"][stage] = {
        rel: _sha256(os.path.join(art_dir, rel)) for rel in sorted(files)
    }
    _write_json(_manifest_path(art_dir), doc)


# --- normalization spec serialization ----------------------------------------

NORM_SPEC_FORMAT = "glyrl-norm-spec"


def _save_norm_spec(path: str, spec: NormalizationSpec) -> None:
    _write_json(path, {
        "format": NORM_SPEC_FORMAT,
        "version": 1,
        "feature_names": list(spec.feature_names),
        "mins": [repr(float(v)) for v in spec.mins],
        "maxs": [repr(float(v)) for v in spec.maxs],
        "gender_codes": list(spec.gender_codes),
        "icu_unit_codes": list(spec.icu_unit_codes),
    })


def _load_norm_spec(path: str) -> NormalizationSpec:
    doc = _read_json(path, "normalization spec")
    if doc.get("format") != NORM_SPEC_FORMAT:
        raise ArtifactError("%s is not a normalization spec" % path)
    try:
        return NormalizationSpec(
            feature_names=tuple(doc["feature_names"]),
            mins=np.array([float(v) for v in doc["mins"]]),
            maxs=np.array([float(v) for v in doc["maxs"]]),
            gender_codes=tuple(doc["gender_codes"]),
            icu_unit_codes=tuple(doc["icu_unit_codes"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError("malformed normalization spec %s: %s" % (path, exc))


# --- shared artifact access ---------------------------------------------------


def _read_cohort_file(path: str, covariates: Sequence[str]) -> List[PatientSeries]:
    try:
        with open(path) as fh:
            return parse_cohort(fh, covariates)
    except OSError as exc:
        raise ArtifactError("cannot read cohort %s: %s" % (path, exc))


def _load_split(config: PipelineConfig, art_dir: str
                ) -> Tuple[List[PatientSeries], List[PatientSeries]]:
    train = _read_cohort_file(os.path.join(art_dir, "train.csv"), config.covariates)
    test = _read_cohort_file(os.path.join(art_dir, "test.csv"), config.covariates)
    return annotate_diabetes(train), annotate_diabetes(test)


def _normalized(config: PipelineConfig, art_dir: str,
                series_list: Sequence[PatientSeries]) -> List[NormalizedSeries]:
    spec = _load_norm_spec(os.path.join(art_dir, "norm_spec.json"))
    return [apply_normalization(s, spec) for s in series_list]


def _representation_matrix(config: PipelineConfig, art_dir: str,
                           normalized: Sequence[NormalizedSeries]) -> np.ndarray:
    """Stack per-hour feature vectors, encoded when configured."""
    points = np.vstack([ns.states for ns in normalized])
    if config.representation == "sparse_ae":
        params = load_encoder(os.path.join(art_dir, "encoder.model"))
        points = encode(points, params)
    return np.asarray(points, dtype=float)


def _write_assignments(path: str, normalized: Sequence[NormalizedSeries],
                       labels: np.ndarray) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient_id", "hour_index", "state_id"])
    pos = 0
    for ns in normalized:
        for hour in range(ns.states.shape[0]):
            writer.writerow([ns.patient_id, hour, int(labels[pos])])
            pos += 1
    if pos != len(labels):
        raise ValueError("assignment count mismatch")
    _write_text(path, buf.getvalue())


def _read_assignments(path: str) -> Dict[str, Dict[int, int]]:
    out: Dict[str, Dict[int, int]] = {}
    try:
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["patient_id", "hour_index", "state_id"]:
                raise ArtifactError("%s is not an assignments file" % path)
            for row in reader:
                if len(row) != 3:
                    raise ArtifactError("malformed assignments row %r" % (row,))
                out.setdefault(row[0], {})[int(row[1])] = int(row[2])
    except OSError as exc:
        raise ArtifactError("cannot read assignments %s: %s" % (path, exc))
    except ValueError as exc:
        raise ArtifactError("malformed assignments %s: %s" % (path, exc))
    return out


# --- stages -------------------------------------------------------------------


def stage_ingest(config: PipelineConfig, input_csv: str, art_dir: str) -> None:
    """Parse, filter, impute, split, and fit normalization (train only)."""
    os.makedirs(art_dir, exist_ok=True)
    patients = _read_cohort_file(input_csv, config.covariates)
    criteria = FilterCriteria(
        min_age=config.preprocessing.min_age,
        min_sofa=config.preprocessing.min_sofa,
        max_missing_fraction=config.preprocessing.max_missing_fraction,
    )
    kept, exclusions = filter_cohort(patients, criteria)
    kept = annotate_diabetes(kept)
    imputed, dropped = impute_cohort(kept, config.covariates)
    if not imputed:
        raise DataError("no patients left after filtering and imputation")
    train, test = split_patients(imputed, config.split.test_fraction,
                                 derive_seed(config.seed, "split"))

    for name, subset in (("train.csv", train), ("test.csv", test)):
        buf = io.StringIO()
        write_cohort(subset, buf, config.covariates)
        _write_text(os.path.join(art_dir, name), buf.getvalue())

    spec = fit_normalization(train, config.covariates)
    _save_norm_spec(os.path.join(art_dir, "norm_spec.json"), spec)
    _write_json(os.path.join(art_dir, "exclusions.json"), {
        "parsed_patients": len(patients),
        "filtered": {k: int(v) for k, v in sorted(exclusions.items())},
        "imputation_dropped": sorted([pid, reason] for pid, reason in dropped),
        "train_patients": len(train),
        "test_patients": len(test),
    })
    _manifest_record(art_dir, config, "ingest",
                     ["train.csv", "test.csv", "norm_spec.json", "exclusions.json"])
    log.info("ingest: %d parsed, %d train / %d test",
             len(patients), len(train), len(test))


def stage_train_encoder(config: PipelineConfig, art_dir: str) -> None:
    """Fit the sparse autoencoder on training-hour state vectors."""
    if config.representation != "sparse_ae":
        log.info("representation %r needs no encoder, skipping",
                 config.representation)
        _manifest_record(art_dir, config, "train-encoder", [])
        return
    train_series, _ = _load_split(config, art_dir)
    normalized = _normalized(config, art_dir, train_series)
    dataset = np.vstack([ns.states for ns in normalized])
    enc = config.encoder
    params = train(
        dataset,
        TrainConfig(epochs=enc.epochs, batch_size=enc.batch_size,
                    learning_rate=enc.learning_rate,
                    seed=derive_seed(config.seed, "encoder"),
                    optimizer=enc.optimizer),
        SparsityConfig(target=enc.sparsity_target, beta=enc.beta),
        latent_dim=enc.latent_dim,
    )
    save_encoder(os.path.join(art_dir, "encoder.model"), params,
                 hyperparameters={"sparsity_target": enc.sparsity_target,
                                  "beta": enc.beta, "epochs": enc.epochs,
                                  "batch_size": enc.batch_size,
                                  "learning_rate": enc.learning_rate,
                                  "optimizer": enc.optimizer})
    _manifest_record(art_dir, config, "train-encoder", ["encoder.model"])


def stage_cluster(config: PipelineConfig, art_dir: str) -> None:
    """Fit k-means on training hours; assign every hour of both splits."""
    train_series, test_series = _load_split(config, art_dir)
    norm_train = _normalized(config, art_dir, train_series)
    norm_test = _normalized(config, art_dir, test_series)
    points_train = _representation_matrix(config, art_dir, norm_train)
    model = kmeans_fit(points_train, config.clustering.k,
                       seed=derive_seed(config.seed, "kmeans"),
                       max_iters=config.clustering.max_iters,
                       tol=config.clustering.tol)
    save_clusters(os.path.join(art_dir, "clusters.model"), model)

    points_test = _representation_matrix(config, art_dir, norm_test)
    labels_train = assign_many(points_train, model)
    labels_test = assign_many(points_test, model) if len(points_test) else \
        np.zeros(0, dtype=int)
    _write_assignments(os.path.join(art_dir, "assignments.csv"),
                       list(norm_train) + list(norm_test),
                       np.concatenate([labels_train, labels_test]))
    _manifest_record(art_dir, config, "cluster",
                     ["clusters.model", "assignments.csv"],
                     extra={"representation": config.representation})


def _assigned_from(series_list: Sequence[PatientSeries],
                   assignments: Dict[str, Dict[int, int]]) -> List[AssignedSeries]:
    out = []
    for series in series_list:
        by_hour = assignments.get(series.patient_id)
        if by_hour is None:
            raise ArtifactError("patient %s missing from assignments"
                                % series.patient_id)
        try:
            states = [by_hour[h.hour_index] for h in series.hours]
        except KeyError as exc:
            raise ArtifactError("patient %s has no state for hour %s"
                                % (series.patient_id, exc))
        out.append(AssignedSeries(series.patient_id, states,
                                  [h.glucose_mgdl for h in series.hours],
                                  series.survived))
    return out


def stage_build_mdp(config: PipelineConfig, art_dir: str) -> None:
    """Turn assigned hours into trajectories and count the training MDP."""
    train_series, test_series = _load_split(config, art_dir)
    assignments = _read_assignments(os.path.join(art_dir, "assignments.csv"))
    space = ActionSpace(config.mdp.bin_edges)
    k = config.clustering.k
    trajs_train = build_trajectories(_assigned_from(train_series, assignments),
                                     space, k)
    trajs_test = build_trajectories(_assigned_from(test_series, assignments),
                                    space, k)
    if not trajs_train:
        raise DataError("no usable training trajectories")
    model = estimate_mdp(trajs_train, k, min_count=config.mdp.min_count,
                         gamma=config.mdp.gamma, action_space=space)
    os.makedirs(os.path.join(art_dir, "mdp"), exist_ok=True)
    save_mdp(os.path.join(art_dir, "mdp", "mdp.txt"), model)
    write_trajectories(os.path.join(art_dir, "mdp", "trajectories_train.csv"),
                       trajs_train)
    write_trajectories(os.path.join(art_dir, "mdp", "trajectories_test.csv"),
                       trajs_test)
    _manifest_record(art_dir, config, "build-mdp",
                     [os.path.join("mdp", "mdp.txt"),
                      os.path.join("mdp", "trajectories_train.csv"),
                      os.path.join("mdp", "trajectories_test.csv")])


def stage_solve(config: PipelineConfig, art_dir: str) -> None:
    """Policy-iterate the optimal policy; evaluate the behavioral one."""
    model = load_mdp(os.path.join(art_dir, "mdp", "mdp.txt"))
    optimal = policy_iteration(model, epsilon=config.solver.epsilon)
    pi_real = extract_real_policy(model)
    v_real = policy_evaluation(model, pi_real, epsilon=config.solver.epsilon)
    real = PolicySolution(policy=pi_real, V=v_real, Q=q_from_v(model, v_real),
                          eval_sweeps=0, improvements=0, converged=True)
    sol_dir = os.path.join(art_dir, "solution")
    os.makedirs(sol_dir, exist_ok=True)
    write_solution(os.path.join(sol_dir, "optimal.csv"), optimal, "optimal")
    write_solution(os.path.join(sol_dir, "real.csv"), real, "real")
    write_q_table(os.path.join(sol_dir, "q_optimal.csv"), optimal)
    _manifest_record(art_dir, config, "solve",
                     [os.path.join("solution", "optimal.csv"),
                      os.path.join("solution", "real.csv"),
                      os.path.join("solution", "q_optimal.csv")])


def stage_calibrate(config: PipelineConfig, art_dir: str) -> None:
    """Fit the mortality-versus-return curve on the training split."""
    model = load_mdp(os.path.join(art_dir, "mdp", "mdp.txt"))
    _, v_real, label = read_solution(os.path.join(art_dir, "solution", "real.csv"))
    if label != "real":
        raise ArtifactError("expected the real-policy solution, found %r" % label)
    trajs_train = read_trajectories(
        os.path.join(art_dir, "mdp", "trajectories_train.csv"))
    curve = calib.fit_curve(v_real[:model.k], trajs_train,
                            n_bins=config.calibration.n_bins,
                            min_bin_support=config.calibration.min_bin_support)
    _write_text(os.path.join(art_dir, "curve.csv"), calib.emit_curve_csv(curve))
    _manifest_record(art_dir, config, "calibrate", ["curve.csv"])


def stage_evaluate(config: PipelineConfig, art_dir: str) -> dict:
    """Score both policies on the test split; anchor against training data."""
    model = load_mdp(os.path.join(art_dir, "mdp", "mdp.txt"))
    pi_opt, _, _ = read_solution(os.path.join(art_dir, "solution", "optimal.csv"))
    pi_real, _, _ = read_solution(os.path.join(art_dir, "solution", "real.csv"))
    curve = calib.parse_curve_csv(
        open(os.path.join(art_dir, "curve.csv")).read())
    trajs_train = read_trajectories(
        os.path.join(art_dir, "mdp", "trajectories_train.csv"))
    trajs_test = read_trajectories(
        os.path.join(art_dir, "mdp", "trajectories_test.csv"))

    representation = config.representation
    manifest = _manifest_read(art_dir)
    recorded = manifest.get("representation")
    if recorded is not None and recorded != representation:
        log.warning("config says representation %r but the artifacts were "
                    "built with %r; keeping the artifact label",
                    representation, recorded)
        representation = recorded

    scoring = trajs_test if trajs_test else trajs_train
    if not trajs_test:
        log.warning("empty test split, scoring on the training split")
    visits = calib.visitation_from_trajectories(scoring, model.k)
    report = calib.evaluate(
        model, pi_real, pi_opt, curve,
        visits / visits.sum(),
        calib.empirical_mortality(scoring, model.k),
        representation=representation,
        config_digest=config.digest(),
        seed=config.seed,
        epsilon=config.solver.epsilon,
        mortality_mapping=config.calibration.mortality_mapping,
    )
    doc = calib.report_to_dict(report)

    visits_train = calib.visitation_from_trajectories(trajs_train, model.k)
    anchor = calib.evaluate(
        model, pi_real, pi_opt, curve,
        visits_train / visits_train.sum(),
        calib.empirical_mortality(trajs_train, model.k),
        representation=representation,
        config_digest=config.digest(),
        seed=config.seed,
        epsilon=config.solver.epsilon,
        mortality_mapping=config.calibration.mortality_mapping,
    )
    doc["train_anchor"] = {
        "estimated_mortality_real": anchor.real.estimated_mortality,
        "empirical_mortality": anchor.cohort_mortality,
    }
    _write_json(os.path.join(art_dir, "report.json"), doc)
    _manifest_record(art_dir, config, "evaluate", ["report.json"])
    return doc


def _run_stage(name: str, fn, *args):
    try:
        return fn(*args)
    except GlyrlError as exc:
        for base in (ConfigError, NumericalError, DataError):
            if isinstance(exc, base):
                raise base("stage %r: %s" % (name, exc)) from exc
        raise


def run_pipeline(config: PipelineConfig, input_csv: str, art_dir: str) -> dict:
    """Chain every stage over one artifacts directory; returns the report."""
    config.validate()
    _run_stage("ingest", stage_ingest, config, input_csv, art_dir)
    _run_stage("train-encoder", stage_train_encoder, config, art_dir)
    _run_stage("cluster", stage_cluster, config, art_dir)
    _run_stage("build-mdp", stage_build_mdp, config, art_dir)
    _run_stage("solve", stage_solve, config, art_dir)
    _run_stage("calibrate", stage_calibrate, config, art_dir)
    return _run_stage("evaluate", stage_evaluate, config, art_dir)
