"""Staged pipeline: train, reduce, learn, residual, constrained learn, report.

Each stage writes one store directory under the output root.  A stage is
keyed by a hash of the configuration sections it reads and the keys of its
upstream stages; a re-run whose key matches the stored manifest loads the
result instead of recomputing it.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from pathlib import Path

import numpy as np

from . import __version__, persist, plotting, stats
from .constraints import ConstraintFunction, RhoSurrogate, assemble_targets, lagrange_iterate
from .diffusion import (DiffusionBasis, build_diffusion_basis, default_eps_diff,
                        diffusion_spectrum, suggest_m)
from .kde import KdeModel
from .models.cavity import CavityModel
from .models.duffing import DuffingModel
from .reduction import KLBasis, PCABasis, kl_expand, kl_time_derivatives, reduce_qw
from .residual import (make_subsample, reference_mean_rho, rho_hat_of_coefficients,
                       residual_realization, rho_hat)
from .sampler import IsdeParams, sample_unconstrained
from .scm import (LinearDecayModel, TimeGrid, TrainingDataset, Trajectory,
                  build_training_dataset)

log = logging.getLogger(__name__)

MODELS = {"duffing": DuffingModel, "cavity2d": CavityModel, "decay": LinearDecayModel}


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        self.cause = exc
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")


def make_model(cfg: dict):
    model_id = cfg["model"]["id"]
    if model_id not in MODELS:
        raise ValueError(f"unknown model id {model_id!r}; known: {sorted(MODELS)}")
    return MODELS[model_id](**cfg["model"]["params"])


def make_grid(model, cfg: dict) -> TimeGrid:
    n_time, horizon = cfg["model"]["n_time"], cfg["model"]["horizon"]
    if isinstance(model, DuffingModel):
        if horizon is not None:
            raise ValueError("the Duffing horizon is fixed by its T parameter")
        return model.cfg.grid(n_time or 2930)
    if isinstance(model, CavityModel):
        if n_time is not None:
            raise ValueError("the cavity grid is set by horizon and the model time step")
        return model.grid(horizon or 10.0)
    return TimeGrid.over(0.0, horizon or 1.0, n_time or 100)


def default_probe(model) -> int:
    """State component followed in the report envelopes."""
    if isinstance(model, CavityModel):
        n1, n2 = model.cfg.n1, model.cfg.n2
        # u1 on the vertical midline, at mid height
        return (n1 // 2 - 1) * n2 + n2 // 2
    return 0


def write_table(path: Path, columns: dict, description: str, meta: dict | None = None):
    """CSV of equal-length columns plus a JSON sidecar describing it."""
    names = list(columns)
    data = [columns[n] if isinstance(columns[n], list) else np.asarray(columns[n]).ravel()
            for n in names]
    length = {len(d) for d in data}
    if len(length) != 1:
        raise ValueError(f"{path.name}: columns differ in length")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for row in zip(*data):
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    side = {"file": path.name, "columns": names, "rows": length.pop(),
            "description": description, **(meta or {})}
    path.with_suffix(".json").write_text(persist.dumps(side))


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return format(float(v), ".17g")


def _hash(obj) -> str:
    return hashlib.sha256(persist.dumps(obj).encode()).hexdigest()[:16]


class Pipeline:
    """Runs the stages of one configuration into ``out``."""

    def __init__(self, cfg: dict, out=None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg["out"])
        self.model = make_model(cfg)
        self.grid = make_grid(self.model, cfg)
        self.executed: list[str] = []
        self._keys: dict[str, str] = {}
        self._objs: dict = {}
        self._results: dict = {}

    # -- keys and storage ------------------------------------------------------

    def key(self, stage: str) -> str:
        if stage in self._keys:
            return self._keys[stage]
        c = self.cfg
        if stage == "train":
            parts = {"seed": c["seed"], "model": c["model"], "train": c["train"]}
            up = []
        elif stage == "reduce":
            parts = {"reduce": c["reduce"], "diffusion": c["diffusion"]}
            up = ["train"]
        elif stage == "learn":
            parts = {"isde": c["isde"], "seed": c["seed"]}
            up = ["reduce"]
        elif stage == "residual":
            parts = {"residual": c["residual"]}
            up = ["learn"]
        elif stage.startswith("constrained_algo"):
            con = dict(c["constrained"])
            con.pop("algos")
            parts = {"constrained": con, "algo": int(stage[-1])}
            up = ["residual"]
        elif stage == "report":
            parts = {"report": c["report"]}
            up = ["residual"] + [f"constrained_algo{a}" for a in c["constrained"]["algos"]]
        else:
            raise KeyError(stage)
        key = _hash({"stage": stage, "version": __version__, "parts": parts,
                     "upstream": [self.key(u) for u in up]})
        self._keys[stage] = key
        return key

    def _stage(self, name: str, compute):
        if name in self._results:
            return self._results[name]
        self._results[name] = self._load_or_run(name, compute)
        return self._results[name]

    def _load_or_run(self, name: str, compute):
        directory = self.out / name
        key = self.key(name)
        if (directory / persist.MANIFEST).exists():
            try:
                arrays, meta = persist.load(directory)
            except persist.IntegrityError as exc:
                raise StageError(name, exc) from exc
            if meta.get("stage_key") == key:
                log.info("stage %s up to date", name)
                return arrays, meta
        directory.mkdir(parents=True, exist_ok=True)
        log.info("running stage %s", name)
        try:
            arrays, meta = compute(directory)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        meta["stage_key"] = key
        persist.save(directory, arrays, meta)
        self.executed.append(name)
        return arrays, meta

    # -- stages ----------------------------------------------------------------

    def train(self):
        def compute(directory):
            tr = self.cfg["train"]
            n_total = max(tr["n_d"], tr["n_d_ref"] or tr["n_d"])
            ds = build_training_dataset(self.model, n_total, self.grid, self.cfg["seed"])
            meta = {"grid": self.grid.as_dict(), "model_id": self.model.model_id,
                    "params": self.model.params(), "seed": self.cfg["seed"],
                    "n_d": tr["n_d"], "n_solved": n_total}
            return {"values": ds.values, "controls": ds.controls}, meta
        return self._stage("train", compute)

    def dataset(self, reference: bool = False) -> TrainingDataset:
        arrays, meta = self.train()
        tr = self.cfg["train"]
        n = (tr["n_d_ref"] or tr["n_d"]) if reference else tr["n_d"]
        return TrainingDataset(self.grid, arrays["values"][:n], arrays["controls"][:n],
                               meta["seed"], meta["model_id"], {"params": meta["params"]})

    def mean_seeds(self, controls) -> tuple:
        seeds = [self.model.derivative_seeds(w) for w in controls]
        return tuple(np.mean([s[k] for s in seeds], axis=0) for k in range(len(seeds[0])))

    def reduce(self):
        def compute(directory):
            ds = self.dataset()
            rc, dc = self.cfg["reduce"], self.cfg["diffusion"]
            kl, q = kl_expand(ds.values, float(rc["eps_kl"]))
            pca, eta = reduce_qw(q, ds.controls.T, float(rc["eps_pca"]), rc["nu_min"])
            eps = default_eps_diff(eta) if dc["eps_diff"] == "auto" else float(dc["eps_diff"])
            spectrum = diffusion_spectrum(eta, eps)
            m = suggest_m(spectrum, float(dc["threshold"])) if dc["m"] == "auto" else int(dc["m"])
            basis = build_diffusion_basis(eta, eps, m)
            n = np.arange(1, kl.energy_errors.size + 1)
            write_table(directory / "kl_spectrum.csv",
                        {"order": n, "eigenvalue": _pad(kl.eigenvalues, n.size),
                         "err_kl": kl.energy_errors},
                        "KL eigenvalues (retained orders) and relative truncation error")
            n = np.arange(1, pca.energy_errors.size + 1)
            write_table(directory / "pca_spectrum.csv",
                        {"order": n, "eigenvalue": _pad(pca.eigenvalues, n.size),
                         "err_pca": pca.energy_errors},
                        "PCA eigenvalues (retained orders) and relative truncation error")
            write_table(directory / "diffusion_spectrum.csv",
                        {"index": np.arange(1, spectrum.size + 1), "kappa": spectrum},
                        "transition-matrix eigenvalues", {"eps_diff": eps, "m": m})
            arrays = {"kl_mean": kl.mean, "kl_modes": kl.modes, "kl_eigenvalues": kl.eigenvalues,
                      "kl_energy": kl.energy_errors, "q": q,
                      "pca_mean": pca.mean, "pca_vectors": pca.vectors,
                      "pca_eigenvalues": pca.eigenvalues, "pca_energy": pca.energy_errors,
                      "eta_d": eta, "diff_g": basis.g, "diff_a": basis.a,
                      "diff_kappa": basis.kappa, "diff_b": basis.b_diag, "diff_spectrum": spectrum}
            meta = {"n_q": kl.n_q, "err_kl": kl.err_kl, "kl_reached": kl.reached,
                    "nu": pca.nu, "n_w": pca.n_w, "err_pca": pca.err_pca,
                    "nu_lower_bound_met": pca.lower_bound_met, "eps_diff": eps, "m": m,
                    "eps_kl": float(rc["eps_kl"]), "eps_pca": float(rc["eps_pca"])}
            return arrays, meta
        return self._stage("reduce", compute)

    def bases(self):
        if "bases" in self._objs:
            return self._objs["bases"]
        arrays, meta = self.reduce()
        ds = self.dataset()
        kl = KLBasis(arrays["kl_mean"], arrays["kl_modes"], arrays["kl_eigenvalues"],
                     meta["err_kl"], self.grid.dt, arrays["kl_energy"], meta["kl_reached"])
        kl = kl_time_derivatives(kl, self.model, self.grid.dt, self.mean_seeds(ds.controls))
        pca = PCABasis(arrays["pca_mean"], arrays["pca_vectors"], arrays["pca_eigenvalues"],
                       n_q=meta["n_q"], n_w=meta["n_w"], err_pca=meta["err_pca"],
                       energy_errors=arrays["pca_energy"],
                       lower_bound_met=meta["nu_lower_bound_met"])
        basis = DiffusionBasis(meta["eps_diff"], arrays["diff_g"], arrays["diff_a"],
                               arrays["diff_kappa"], arrays["diff_b"], arrays["diff_spectrum"])
        kde = KdeModel(arrays["eta_d"])
        self._objs["bases"] = (kl, arrays["q"], pca, kde, basis)
        return self._objs["bases"]

    def isde_params(self) -> IsdeParams:
        return IsdeParams(seed=self.cfg["seed"], **self.cfg["isde"])

    def indices(self):
        subsample = self.cfg["residual"]["subsample"]
        values = self.dataset().values if subsample["kind"] == "amplitude" else None
        return make_subsample(subsample, self.grid, values)

    def learned_rho_hat(self, q, w):
        kl = self.bases()[0]
        return rho_hat_of_coefficients(self.model, kl, q, w, self.grid, self.indices())

    def learn(self):
        def compute(directory):
            kl, _, pca, kde, basis = self.bases()
            latents = sample_unconstrained(kde, basis, self.isde_params())
            q, w = pca.decode(latents.eta)
            return {"eta": latents.eta, "q": q, "w": w.T}, {"provenance": latents.provenance}
        return self._stage("learn", compute)

    def residual(self):
        def compute(directory):
            kl, _, pca, _, _ = self.bases()
            idx = self.indices()
            ref_ds = self.dataset(reference=True)
            q_ref = kl.project(ref_ds.values)
            ref, b_rho, report = reference_mean_rho(self.model, kl, q_ref, ref_ds.controls,
                                                    self.grid, idx)
            ds = self.dataset()
            raw = np.array([rho_hat(residual_realization(self.model, tr, w, self.grid, idx),
                                    self.model.norm_blocks)
                            for w, tr in ((w, self._solved(v, w)) for v, w in
                                          zip(ds.values, ds.controls))])
            learned, _ = self.learn()
            rho_learned = self.learned_rho_hat(learned["q"], learned["w"])
            write_table(directory / "rho_reference.csv",
                        {"realization": np.arange(1, report.rho_hat.size + 1),
                         "rho_hat_kl": report.rho_hat, "rho": report.rho},
                        "residual of KL-reconstructed reference trajectories",
                        {"rho_ref_mean": ref, "b_rho": b_rho})
            write_table(directory / "rho_learned.csv",
                        {"sample": np.arange(1, rho_learned.size + 1),
                         "rho_hat": rho_learned, "rho": rho_learned / ref},
                        "residual of unconstrained learned realizations",
                        {"rho_ref_mean": ref})
            arrays = {"indices": idx.astype(np.int64), "rho_hat_ref": report.rho_hat,
                      "rho_hat_train_raw": raw, "rho_hat_learned": rho_learned}
            meta = {"rho_ref_mean": ref, "b_rho": b_rho, "n_d_ref": int(report.rho_hat.size),
                    "kl_reconstructed": True,
                    "summary_ref": report.summary(),
                    "mean_rho_hat_train_raw": float(raw.mean()),
                    "mean_rho_hat_learned": float(rho_learned.mean()),
                    "mean_rho_learned": float(rho_learned.mean() / ref)}
            return arrays, meta
        return self._stage("residual", compute)

    def _solved(self, values, w):
        seeds = self.model.derivative_seeds(w)
        return Trajectory(values, self.model.time_derivatives(values, self.grid.dt, seeds))

    def rho_evaluator(self, ref: float):
        kl, _, pca, _, _ = self.bases()

        def evaluate(eta):
            q, w = pca.decode(eta)
            return (self.learned_rho_hat(q, w.T) / ref) ** 2
        return evaluate

    def constrained(self, algo: int):
        name = f"constrained_algo{algo}"

        def compute(directory):
            kl, _, pca, kde, basis = self.bases()
            res_arrays, res_meta = self.residual()
            learned, _ = self.learn()
            cc = self.cfg["constrained"]
            ref = res_meta["rho_ref_mean"]
            rho = res_arrays["rho_hat_learned"] / ref
            surrogate = RhoSurrogate(learned["eta"], rho, bandwidth=cc["bandwidth"],
                                     shift=cc["shift"])
            constraint = ConstraintFunction(pca, surrogate, self.rho_evaluator(ref))
            targets = assemble_targets(self.dataset().controls, res_meta["b_rho"])
            trace, latents, h = lagrange_iterate(
                algo, targets, constraint, kde, basis, self.isde_params(),
                max_iter=cc["max_iter"], patience=cc["patience"], damping=cc["damping"])
            q, w = pca.decode(latents.eta)
            rho_hat_c = np.sqrt(h[0]) * ref
            rows = trace.rows()
            write_table(directory / "trace.csv",
                        {k: [r[k] for r in rows] for k in rows[0]},
                        f"Lagrange iteration trace for algorithm {algo}",
                        {"i_opt": trace.i_opt, "b": targets.vector()})
            arrays = {"eta": latents.eta, "q": q, "w": w.T, "rho_hat": rho_hat_c,
                      "lambdas": np.array(trace.lambdas),
                      "err_r": np.array(trace.err_r), "err_w": np.array(trace.err_w),
                      "err_rw": np.array(trace.err_rw)}
            meta = {"algo": algo, "i_opt": trace.i_opt, "iterations": len(trace.lambdas),
                    "lambda_opt": trace.lambdas[trace.i_opt - 1],
                    "targets": targets.vector(), "mean_rho_hat": float(rho_hat_c.mean()),
                    "mean_rho": float(rho_hat_c.mean() / ref),
                    "provenance": latents.provenance}
            return arrays, meta
        return self._stage(name, compute)

    def report(self):
        def compute(directory):
            return self._report(directory)
        return self._stage("report", compute)

    def _report(self, directory: Path):
        rc = self.cfg["report"]
        kl, _, pca, _, _ = self.bases()
        ds = self.dataset()
        res_arrays, res_meta = self.residual()
        learned, _ = self.learn()
        sets = {"training": (ds.controls, res_arrays["rho_hat_train_raw"]),
                "learned": (learned["w"], res_arrays["rho_hat_learned"])}
        traj = {"learned": learned["q"]}
        for algo in self.cfg["constrained"]["algos"]:
            arrays, meta = self.constrained(algo)
            sets[f"algo{algo}"] = (arrays["w"], arrays["rho_hat"])
            traj[f"algo{algo}"] = arrays["q"]
            write_table(directory / f"trace_algo{algo}.csv",
                        {"i": np.arange(1, arrays["err_r"].size + 1), "err_R": arrays["err_r"],
                         "err_W": arrays["err_w"], "err_RW": arrays["err_rw"]},
                        f"constraint errors per iteration, algorithm {algo}",
                        {"i_opt": meta["i_opt"]})
            if rc["figures"]:
                n = np.arange(1, arrays["err_r"].size + 1)
                plotting.line_plot(directory / f"trace_algo{algo}.png", n,
                                   {"err_R": arrays["err_r"], "err_W": arrays["err_w"],
                                    "err_RW": arrays["err_rw"]},
                                   xlabel="iteration", ylabel="relative error", logy=True)
        ref = res_meta["rho_ref_mean"]
        summary = {"set": [], "n": [], "mean_rho_hat": [], "std_rho_hat": [], "mean_rho": [],
                   "l2_rho_hat": []}
        for label, (_, rho_h) in sets.items():
            mom = stats.moments(rho_h)
            summary["set"].append(label)
            summary["n"].append(mom["n"])
            summary["mean_rho_hat"].append(mom["mean"])
            summary["std_rho_hat"].append(mom["std"])
            summary["mean_rho"].append(mom["mean"] / ref)
            summary["l2_rho_hat"].append(np.sqrt(mom["second_moment"]))
        write_table(directory / "residual_summary.csv", summary,
                     "residual statistics per realization set", {"rho_ref_mean": ref})

        n_w = ds.controls.shape[1]
        for j in range(n_w):
            grid = stats.pdf_grid(*[w[:, j] for w, _ in sets.values()], n=rc["pdf_points"])
            curves = {label: stats.scalar_pdf(w[:, j], grid) for label, (w, _) in sets.items()}
            write_table(directory / f"pdf_w{j + 1}.csv", {"w": grid, **curves},
                        f"kernel density of control {j + 1}")
            if rc["figures"]:
                plotting.line_plot(directory / f"pdf_w{j + 1}.png", grid, curves,
                                   xlabel=f"w{j + 1}", ylabel="pdf")
        rho_sets = {k: v[1] / ref for k, v in sets.items()}
        grid = np.linspace(0.0, max(float(np.max(r)) for r in rho_sets.values()) * 1.2,
                           rc["pdf_points"])
        curves = {label: stats.scalar_pdf(r, grid) for label, r in rho_sets.items()}
        write_table(directory / "pdf_rho.csv", {"rho": grid, **curves},
                    "kernel density of the normalized residual")
        if rc["figures"]:
            plotting.line_plot(directory / "pdf_rho.png", grid, curves, xlabel="rho",
                               ylabel="pdf")

        probe = rc["probe"] if rc["probe"] is not None else default_probe(self.model)
        t = self.grid.times
        columns = {"t": t, "training_mean": ds.values[:, probe, :].mean(axis=0)}
        envelopes = {}
        for label, q in traj.items():
            y = kl.mean[probe] + np.einsum("ta,al->lt", kl.modes[:, probe, :], q)
            if y.shape[0] >= 50:
                lo, hi, mean = stats.confidence_envelope(y, float(rc["p_c"]))
                columns.update({f"{label}_lower": lo, f"{label}_upper": hi,
                                f"{label}_mean": mean})
                envelopes[label] = (lo, hi, mean)
        write_table(directory / "envelope.csv", columns,
                    f"pointwise envelope of state component {probe}",
                    {"probe": probe, "p_c": float(rc["p_c"])})
        if rc["figures"]:
            for label, (lo, hi, mean) in envelopes.items():
                plotting.envelope_plot(directory / f"envelope_{label}.png", t, lo, hi, mean,
                                       columns["training_mean"], ylabel=f"y[{probe}]")
        return {}, {"files": sorted(p.name for p in directory.iterdir()
                                     if p.name != persist.MANIFEST)}

    def run(self, until: str = "report", algos=None):
        """Run stages up to ``until``; returns the list of executed stages."""
        self.train()
        if until == "train":
            return self.executed
        self.reduce()
        if until == "reduce":
            return self.executed
        self.learn()
        if until == "learn":
            return self.executed
        self.residual()
        if until == "residual":
            return self.executed
        for algo in (algos or self.cfg["constrained"]["algos"]):
            self.constrained(algo)
        if until == "constrained":
            return self.executed
        self.report()
        return self.executed


def _pad(values, n):
    out = np.full(n, np.nan)
    out[: values.size] = values
    return out

