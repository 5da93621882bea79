"""Command-line interface: simulate, fit, predict, compare.

Data CSVs carry the outcome in the first column and covariates after it.
Categorical covariates are one-hot expanded; missing numeric cells get a
missing-indicator column plus median imputation (can be disabled). Models
persist as JSON: a self-describing header (config, label map, covariate
schema) plus per-draw covariance matrices and serialized forests.

Exit codes: 0 ok, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from . import diagnostics, predict, simgen
from .data import Dataset, encode_outcomes
from .sampler import ChainConfig, NumericalError, PosteriorDraws, run_chain
from .trees import packed_from_records, packed_records

MODEL_FORMAT = "mpbart-model"
MODEL_VERSION = 1
MISSING_LEVEL = "__missing__"


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    algorithm: str = "p2"
    reference_level: str | None = None
    num_trees: int = 100
    burn_in: int = 50_000
    draws: int = 30_000
    thin: int = 1
    nu_offset: float = 1.0  # degrees of freedom minus the latent dimension
    psi_offdiag: float = 0.0
    split_base: float = 0.95
    split_power: float = 2.0
    leaf_k: float = 2.0
    seed: int = 0
    chains: int = 1
    impute_missing: bool = True

    def __post_init__(self):
        if self.algorithm not in ("kd", "p1", "p2"):
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        for name in ("num_trees", "burn_in", "draws", "thin", "chains"):
            value = getattr(self, name)
            if name != "burn_in" and value <= 0 or value < 0:
                raise ValidationError(f"{name} must be positive, got {value}")
        if self.nu_offset < 1:
            raise ValidationError("nu offset must be at least 1")

    def chain_config(self, C: int) -> ChainConfig:
        psi = np.eye(C)
        if C == 2:
            psi[0, 1] = psi[1, 0] = self.psi_offdiag
        elif self.psi_offdiag != 0.0:
            raise ValidationError(
                "psi off-diagonal shortcut only supported for 3-category data"
            )
        return ChainConfig(
            burn_in=self.burn_in,
            draws=self.draws,
            num_trees=self.num_trees,
            thin=self.thin,
            nu=C + self.nu_offset,
            psi=psi,
            split_base=self.split_base,
            split_power=self.split_power,
            leaf_k=self.leaf_k,
        )


# -- CSV ingestion ------------------------------------------------------------


def build_schema(df: pd.DataFrame, impute_missing: bool = True) -> dict:
    """Covariate encoding plan from the training frame (all but column 0)."""
    schema = {
        "outcome": df.columns[0],
        "numeric": [],
        "categorical": {},
        "medians": {},
        "missing_indicators": [],
        "impute_missing": bool(impute_missing),
    }
    for col in df.columns[1:]:
        series = df[col]
        if pd.api.types.is_numeric_dtype(series):
            schema["numeric"].append(col)
            if series.isna().any():
                if not impute_missing:
                    raise ValidationError(f"column {col!r} has missing values")
                schema["medians"][col] = float(series.median())
                schema["missing_indicators"].append(col)
        else:
            levels = sorted(str(v) for v in series.dropna().unique())
            if series.isna().any():
                levels.append(MISSING_LEVEL)
            schema["categorical"][col] = levels
    return schema


def encode_covariates(df: pd.DataFrame, schema: dict) -> tuple[np.ndarray, list[str]]:
    columns = []
    names = []
    for col in df.columns[1:]:
        if col not in schema["numeric"] and col not in schema["categorical"]:
            raise ValidationError(f"unexpected column {col!r}")
    for col in schema["numeric"]:
        if col not in df.columns:
            raise ValidationError(f"missing covariate column {col!r}")
        series = pd.to_numeric(df[col], errors="coerce")
        if series.isna().any() and col not in schema["missing_indicators"]:
            raise ValidationError(f"column {col!r} has missing or non-numeric cells")
        values = series.to_numpy(dtype=float)
        if col in schema["missing_indicators"]:
            miss = np.isnan(values)
            values = np.where(miss, schema["medians"][col], values)
            columns.append(values)
            names.append(col)
            columns.append(miss.astype(float))
            names.append(f"{col}__missing")
        else:
            columns.append(values)
            names.append(col)
    for col, levels in schema["categorical"].items():
        if col not in df.columns:
            raise ValidationError(f"missing covariate column {col!r}")
        raw = df[col].astype(object)
        raw = raw.where(~raw.isna(), MISSING_LEVEL).astype(str)
        for level in levels:
            columns.append((raw == level).to_numpy(dtype=float))
            names.append(f"{col}={level}")
    return np.column_stack(columns), names


def load_training_data(
    path: str, reference_level: str | None, impute_missing: bool = True
) -> tuple[Dataset, dict]:
    df = pd.read_csv(path)
    if df.shape[1] < 2:
        raise ValidationError("data needs an outcome column and covariates")
    outcome = df.iloc[:, 0]
    if outcome.isna().any():
        raise ValidationError("outcome column has missing values")
    labels = outcome.astype(str).to_numpy()
    levels = sorted(set(labels))
    if len(levels) < 2:
        raise ValidationError("outcome needs at least 2 levels")
    if reference_level is None:
        reference_level = levels[-1]
    if reference_level not in levels:
        raise ValidationError(
            f"reference level {reference_level!r} not among observed levels {levels}"
        )
    S, order = encode_outcomes(labels, reference_level)
    schema = build_schema(df, impute_missing)
    X, names = encode_covariates(df, schema)
    return Dataset(S=S, X=X, label_order=order, covariate_names=names), schema


# -- Model persistence --------------------------------------------------------


def save_model(
    path: str, config: RunConfig, draws: PosteriorDraws, schema: dict
) -> None:
    body = []
    for sigma, forests in zip(draws.kept_sigmas, draws.kept_forests):
        body.append(
            {
                "sigma": [[float(v) for v in row] for row in sigma],
                "forests": [packed_records(pf) for pf in forests],
            }
        )
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(config),
        "label_order": [str(v) for v in draws.label_order],
        "covariate_names": draws.covariate_names,
        "schema": schema,
        "burn_in": draws.burn_in,
        "thin": draws.thin,
        "draws": body,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_model(path: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValidationError(f"{path} is not a model file")
    doc["kept_sigmas"] = np.array([d["sigma"] for d in doc["draws"]])
    doc["kept_forests"] = [
        [packed_from_records(f) for f in d["forests"]] for d in doc["draws"]
    ]
    return doc


def write_traces(prefix: str, draws: PosteriorDraws) -> None:
    C = draws.num_latent
    data = {"iteration": np.arange(1, draws.sigma_trace.shape[0] + 1)}
    for i in range(C):
        for j in range(i, C):
            data[f"sigma_{i + 1}{j + 1}"] = draws.sigma_trace[:, i, j]
    depth = diagnostics.avg_tree_depth_trace(draws)
    for j in range(C):
        data[f"avg_depth_dim{j + 1}"] = depth[:, j]
    data["mu_l1"] = draws.mu_l1_trace
    data["alpha1_sq"] = draws.alpha1_trace
    pd.DataFrame(data).to_csv(f"{prefix}_trace.csv", index=False)


# -- Commands -----------------------------------------------------------------


def _run_one_chain(args) -> PosteriorDraws:
    dataset, chain_cfg, algorithm, seed, chain_idx = args
    rng = np.random.default_rng([seed, chain_idx])
    return run_chain(dataset, chain_cfg, algorithm, rng)


def run_chains(dataset: Dataset, config: RunConfig) -> list[PosteriorDraws]:
    chain_cfg = config.chain_config(dataset.num_latent)
    jobs = [
        (dataset, chain_cfg, config.algorithm, config.seed, k)
        for k in range(config.chains)
    ]
    workers = int(os.environ.get("MPBART_THREADS", "1"))
    if config.chains > 1 and workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, config.chains)) as pool:
            return list(pool.map(_run_one_chain, jobs))
    return [_run_one_chain(job) for job in jobs]


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        algorithm=args.algorithm,
        reference_level=args.reference_level,
        num_trees=args.num_trees,
        burn_in=args.burn_in,
        draws=args.draws,
        thin=args.thin,
        nu_offset=args.nu_offset,
        psi_offdiag=args.psi_offdiag,
        seed=args.seed,
        chains=args.chains,
        impute_missing=not args.no_impute,
    )


def cmd_simulate(args) -> int:
    spec = simgen.SimSpec(n=args.n, setting=args.setting, rho=args.rho)
    rng = np.random.default_rng(args.seed)
    simgen.generate(spec, rng).to_csv(args.out, index=False)
    return 0


def cmd_fit(args) -> int:
    config = _config_from_args(args)
    dataset, schema = load_training_data(
        args.data, config.reference_level, config.impute_missing
    )
    results = run_chains(dataset, config)
    prefix, _ = os.path.splitext(args.out)
    summaries = []
    for k, draws in enumerate(results):
        suffix = f"_chain{k + 1}" if config.chains > 1 else ""
        save_model(f"{prefix}{suffix}.json", config, draws, schema)
        write_traces(f"{prefix}{suffix}", draws)
        summaries.append(diagnostics.posterior_summary(draws))
    with open(f"{prefix}_summary.json", "w") as fh:
        json.dump(summaries if config.chains > 1 else summaries[0], fh, indent=2)
    return 0


def _predict_codes(doc: dict, data_path: str, seed: int) -> tuple[np.ndarray, list]:
    df = pd.read_csv(data_path)
    frame = df.iloc[:, 1:] if df.columns[0] == doc["schema"]["outcome"] else df
    frame = frame.copy()
    frame.insert(0, doc["schema"]["outcome"], "")
    X, names = encode_covariates(frame, doc["schema"])
    if names != doc["covariate_names"]:
        raise ValidationError("covariate schema mismatch after encoding")
    rng = np.random.default_rng(seed)
    draws = _draws_view(doc)
    return predict.posterior_predict(draws, X, rng), doc["label_order"]


def _draws_view(doc: dict) -> PosteriorDraws:
    J = len(doc["kept_forests"])
    C = doc["kept_sigmas"].shape[1] if J else 0
    empty = np.empty((0,))
    return PosteriorDraws(
        algorithm=doc["config"]["algorithm"],
        burn_in=doc["burn_in"],
        thin=doc["thin"],
        label_order=doc["label_order"],
        covariate_names=doc["covariate_names"],
        num_trees=doc["config"]["num_trees"],
        sigma_trace=np.empty((0, C, C)),
        tree_depths=np.empty((0, C, 0)),
        mu_l1_trace=empty,
        alpha1_trace=empty,
        kept_sigmas=doc["kept_sigmas"],
        kept_forests=doc["kept_forests"],
    )


def cmd_predict(args) -> int:
    doc = load_model(args.model)
    codes, label_order = _predict_codes(doc, args.data, args.seed)
    labels = np.asarray(label_order, dtype=object)
    if args.mode == "draws":
        out = pd.DataFrame(
            labels[codes], columns=[f"draw_{j + 1}" for j in range(codes.shape[1])]
        )
    else:
        modes, ties = predict.mode_categories(codes)
        out = pd.DataFrame({"mode": labels[modes], "mode_tied": ties.astype(int)})
        J = codes.shape[1]
        for c, label in enumerate(label_order):
            out[f"freq_{label}"] = (codes == c).sum(axis=1) / J
    out.to_csv(args.out, index=False)
    return 0


def cmd_compare(args) -> int:
    train_df = pd.read_csv(args.train)
    truth_col = train_df.columns[0]
    test_df = pd.read_csv(args.test)
    if list(test_df.columns) != list(train_df.columns):
        raise ValidationError("train and test CSVs must share a header")
    rows = []
    for algorithm in args.algorithms.split(","):
        for ref in args.reference_levels.split(","):
            config = RunConfig(
                algorithm=algorithm.strip(),
                reference_level=ref.strip(),
                num_trees=args.num_trees,
                burn_in=args.burn_in,
                draws=args.draws,
                thin=args.thin,
                nu_offset=args.nu_offset,
                psi_offdiag=args.psi_offdiag,
                seed=args.seed,
            )
            dataset, schema = load_training_data(args.train, config.reference_level)
            draws = run_chains(dataset, config)[0]
            rng = np.random.default_rng([config.seed, 10_000])
            labels = {str(v): c for c, v in enumerate(dataset.label_order)}

            def score(df):
                frame = df.copy()
                X, _ = encode_covariates(frame, schema)
                S = np.array([labels[str(v)] for v in frame[truth_col]])
                codes = predict.posterior_predict(draws, X, rng)
                agree = predict.accuracy_agreement(S, codes)
                mode_acc, ties = predict.accuracy_mode(S, codes)
                return agree, mode_acc, ties

            train_scores = score(train_df)
            test_scores = score(test_df)
            rows.append(
                {
                    "algorithm": config.algorithm,
                    "reference_level": config.reference_level,
                    "psi_offdiag": config.psi_offdiag,
                    "train_agreement": train_scores[0],
                    "train_mode_accuracy": train_scores[1],
                    "test_agreement": test_scores[0],
                    "test_mode_accuracy": test_scores[1],
                    "test_mode_ties": test_scores[2],
                    "sigma12_mean": (
                        float(draws.kept_sigmas[:, 0, 1].mean())
                        if draws.num_latent == 2
                        else float("nan")
                    ),
                }
            )
    pd.DataFrame(rows).to_csv(args.out, index=False)
    return 0


# -- Argument parsing ---------------------------------------------------------


def _add_fit_options(p: argparse.ArgumentParser):
    p.add_argument("--algorithm", default="p2", choices=["kd", "p1", "p2"])
    p.add_argument("--num-trees", type=int, default=100)
    p.add_argument("--burn-in", type=int, default=50_000)
    p.add_argument("--draws", type=int, default=30_000)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--nu-offset", type=float, default=1.0,
                   help="inverse-Wishart dof minus the latent dimension")
    p.add_argument("--psi-offdiag", type=float, default=0.0,
                   help="off-diagonal of the inverse-Wishart scale (3-category)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--no-impute", action="store_true",
                   help="fail on missing covariate cells instead of imputing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpbart",
        description="Multinomial probit regression with sums of trees.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset CSV")
    p.add_argument("--setting", type=int, default=1, choices=[1, 2])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model to a CSV")
    p.add_argument("data")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--reference-level", default=None)
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict from a saved model")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--mode", default="summary", choices=["draws", "summary"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="accuracy table over an algorithm grid")
    p.add_argument("train")
    p.add_argument("test")
    p.add_argument("--algorithms", default="p1,p2")
    p.add_argument("--reference-levels", required=True,
                   help="comma-separated outcome labels")
    p.add_argument("--out", required=True)
    _add_fit_options(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
