"""Batch command line: ``bcsr-eit <stage> --config exp.json --out results/``.

Stages write into a fixed layout below ``--out``::

    meshes/   sim_mesh.json, recon_mesh.json, fingerprints.json
    data/     snr<S>_seed<k>.json             simulated datasets
    results/  <method>_snr<S>_seed<k>[_nb<n>].json/.csv
    logs/     per-run LMF iteration logs
    metrics.csv, summary.json, ventilation_*.csv, vtk/
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import basis as basis_mod
from .baselines import build_ld, default_gn_weight, gn_l2_reconstruct, ld_absolute, ld_reconstruct, sweep_alpha
from .boundmap import calibrate_sigma0, warm_start
from .config import ConfigError, Experiment, load_config
from .forward import ForwardError, ForwardModel
from .mesh import MeshError
from .mesh_io import save_mesh, write_vtk
from .metrics import (
    MetricReport,
    compute_metrics,
    transfer_field,
    ventilation_series,
    write_metrics_csv,
    write_ventilation_csv,
)
from .phantoms import (
    NoiseModel,
    breathing_sequence,
    lung_masks,
    rasterize_phantom,
    read_dataset,
    write_dataset,
)
from .protocol import StimulationProtocol
from .recon import reconstruct

logger = logging.getLogger("bcsr_eit.cli")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_GUARD = 0, 2, 3, 4


class GuardError(RuntimeError):
    """Validation or inverse-crime guard failure (exit code 4)."""


class SolverFailure(RuntimeError):
    """One or more methods failed; partial results were written (exit code 3)."""


def snr_tag(snr: float) -> str:
    return "inf" if math.isinf(snr) else f"{snr:g}"


def run_tag(snr: float, seed: int) -> str:
    return f"snr{snr_tag(snr)}_seed{seed}"


def _dump(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1))


def _write_field_csv(path: Path, columns: dict) -> None:
    names = list(columns)
    cols = [np.asarray(columns[n], dtype=float) for n in names]
    lines = ["node," + ",".join(names)]
    lines += [f"{i}," + ",".join(repr(float(c[i])) for c in cols) for i in range(len(cols[0]))]
    path.write_text("\n".join(lines) + "\n")


class Context:
    """Lazily built meshes, models and bases for one experiment."""

    def __init__(self, config: dict, out: Path):
        self.exp = Experiment(config)
        self.config = config
        self.out = Path(out)
        self._cache = {}

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def sim(self):
        return self._get("sim", lambda: self.exp.mesh("sim"))

    @property
    def recon(self):
        return self._get("recon", lambda: self.exp.mesh("recon"))

    @property
    def protocol(self) -> StimulationProtocol:
        return self._get("protocol", lambda: self.exp.protocol(self.recon[1].n_electrodes))

    @property
    def sim_model(self) -> ForwardModel:
        return self._get("sim_model", lambda: ForwardModel(*self.sim, self.protocol))

    @property
    def recon_model(self) -> ForwardModel:
        return self._get("recon_model", lambda: ForwardModel(*self.recon, self.protocol))

    def guard(self) -> None:
        fs, fr = self.sim[0].fingerprint(), self.recon[0].fingerprint()
        if self.config["enforce_no_inverse_crime"] and fs == fr:
            raise GuardError(
                f"simulation and reconstruction meshes are identical (fingerprint {fs:016x}); "
                "set enforce_no_inverse_crime=false to allow this"
            )
        if self.sim[1].n_electrodes != self.recon[1].n_electrodes:
            raise GuardError("simulation and reconstruction layouts differ in electrode count")

    def basis(self, n_basis: int):
        def build():
            cache = basis_mod.cache_dir() or self.out / "cache"
            return basis_mod.mesh_basis(self.recon[0], n_basis, cache)

        return self._get(("basis", n_basis), build)

    def truth_sim(self) -> np.ndarray:
        return self._get("truth_sim", lambda: rasterize_phantom(self.exp.case.phantom, self.sim[0]))

    def truth_recon(self) -> np.ndarray:
        return self._get(
            "truth_recon", lambda: transfer_field(self.sim[0], self.truth_sim(), self.recon[0])
        )

    def u_homo(self) -> np.ndarray:
        return self._get(
            "u_homo",
            lambda: self.recon_model.measure(np.full(self.recon[0].n_nodes, self.config["sigma_homo"])),
        )

    def tags(self) -> list[tuple[str, float, int]]:
        return [(run_tag(s, k), s, k) for s in self.exp.snr_values for k in self.config["seeds"]]


# -- stages ------------------------------------------------------------------------------


def run_mesh(ctx: Context) -> None:
    ctx.guard()
    d = ctx.out / "meshes"
    d.mkdir(parents=True, exist_ok=True)
    save_mesh(d / "sim_mesh.json", *ctx.sim)
    save_mesh(d / "recon_mesh.json", *ctx.recon)
    _dump(
        d / "fingerprints.json",
        {
            "sim": f"{ctx.sim[0].fingerprint():016x}",
            "recon": f"{ctx.recon[0].fingerprint():016x}",
            "sim_nodes": ctx.sim[0].n_nodes,
            "recon_nodes": ctx.recon[0].n_nodes,
        },
    )


def run_basis(ctx: Context) -> None:
    for nb in ctx.exp.n_basis_values(ctx.recon[0].n_nodes):
        b = ctx.basis(nb)
        logger.info("basis N_b=%d ready (lambda_max %.4g)", nb, b.eigenvalues[-1])


def _frame_seeds(seed: int, n: int) -> list[int]:
    states = np.random.SeedSequence(seed).spawn(n)
    return [int(s.generate_state(1)[0]) for s in states]


def _simulate_point(ctx: Context, tag: str, snr: float, seed: int) -> None:
    fp = ctx.sim[0].fingerprint()
    if ctx.config["mode"] == "absolute":
        noise = NoiseModel(snr, seed)
        v_clean = ctx.sim_model.measure(ctx.truth_sim())
        write_dataset(ctx.out / "data" / f"{tag}.json", ctx.protocol, v_clean, noise.apply(v_clean), snr, seed, fp)
        return
    frames = _difference_frames(ctx, "sim")
    seeds = _frame_seeds(seed, len(frames) + 1)
    base = ctx.truth_sim()
    v_base = ctx.sim_model.measure(base)
    payload = {
        "mode": "difference",
        "protocol": ctx.protocol.to_dict(),
        "snr_db": None if math.isinf(snr) else snr,
        "seed": seed,
        "mesh_fingerprint": f"{fp:016x}",
        "baseline": {"V_clean": v_base.tolist(), "V_noisy": NoiseModel(snr, seeds[0]).apply(v_base).tolist()},
        "frames": [],
    }
    for d, s in zip(frames, seeds[1:]):
        v = ctx.sim_model.measure(base + d)
        payload["frames"].append({"V_clean": v.tolist(), "V_noisy": NoiseModel(snr, s).apply(v).tolist()})
    _dump(ctx.out / "data" / f"{tag}.json", payload)


def _difference_frames(ctx: Context, which: str) -> list[np.ndarray]:
    p = ctx.exp.case.phantom
    opts = ctx.config["difference"]
    mesh = ctx.sim[0] if which == "sim" else ctx.recon[0]
    return breathing_sequence(
        mesh,
        p.labelled("left_lung"),
        p.labelled("right_lung"),
        n_frames=opts.get("n_frames", 5),
        depth=opts.get("depth", 0.05),
        right_left_ratio=opts.get("right_left_ratio", 1.5),
    )


def run_simulate(ctx: Context, jobs: int = 1) -> None:
    ctx.guard()
    (ctx.out / "data").mkdir(parents=True, exist_ok=True)
    _grid(ctx, "_simulate_point", ctx.tags(), jobs)


def _load_dataset(ctx: Context, tag: str) -> dict:
    path = ctx.out / "data" / f"{tag}.json"
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run the simulate stage first")
    raw = json.loads(path.read_text())
    if raw.get("mode") == "difference":
        data = dict(raw)
        data["protocol"] = StimulationProtocol.from_dict(raw["protocol"])
        data["mesh_fingerprint"] = int(raw["mesh_fingerprint"], 16)
    else:
        data = read_dataset(path)
    if data["mesh_fingerprint"] != ctx.sim[0].fingerprint():
        raise GuardError(f"{path}: dataset was simulated on a different mesh than the config's sim_mesh")
    if data["protocol"].to_json() != ctx.protocol.to_json():
        raise GuardError(f"{path}: dataset protocol differs from the configured protocol")
    return data


@contextlib.contextmanager
def _iteration_log(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    rec_logger = logging.getLogger("bcsr_eit.recon")
    old = rec_logger.level
    rec_logger.setLevel(logging.INFO)
    rec_logger.addHandler(handler)
    try:
        yield
    finally:
        rec_logger.removeHandler(handler)
        rec_logger.setLevel(old)
        handler.close()


def _save_result(ctx: Context, name: str, payload: dict, fields: dict) -> None:
    res = ctx.out / "results"
    _dump(res / f"{name}.json", payload)
    _write_field_csv(res / f"{name}.csv", fields)


def _bcsr_absolute(ctx, V, nb):
    lo, hi = ctx.exp.bounds
    sigma_homo = np.full(ctx.recon[0].n_nodes, ctx.config["sigma_homo"])
    s, bm = calibrate_sigma0(V, ctx.u_homo(), sigma_homo, lo, hi, ctx.config["scale_rule"])
    return reconstruct(
        *ctx.recon, ctx.protocol, V, ctx.basis(nb), bm, ctx.exp.lmf_config(), ctx.exp.tv_config(),
        snr_estimate=None, model=ctx.recon_model,
    ), s, bm


def _ld_alpha(ctx, ld, dV, truth_delta):
    opts = ctx.config["ld"]
    if opts.get("sweep", False):
        alpha, _ = sweep_alpha(ld, dV, truth_delta=truth_delta)
        return alpha
    return opts.get("alpha_reg", ld.alpha_reg)


def _reconstruct_absolute(ctx: Context, tag: str, snr: float, seed: int) -> list[str]:
    data = _load_dataset(ctx, tag)
    V = data["V_noisy"]
    failures = []
    meta = {"case": ctx.config["case"], "snr": None if math.isinf(snr) else snr, "seed": seed}
    tv = ctx.exp.tv_config()
    lo, hi = ctx.exp.bounds
    sigma_homo = np.full(ctx.recon[0].n_nodes, ctx.config["sigma_homo"])
    for method in ctx.config["methods"]:
        names = (
            [(f"bcsr_{tag}_nb{nb}", nb) for nb in ctx.exp.n_basis_values(ctx.recon[0].n_nodes)]
            if method == "bcsr"
            else [(f"{method}_{tag}", None)]
        )
        for name, nb in names:
            try:
                if method == "bcsr":
                    s, bm = calibrate_sigma0(V, ctx.u_homo(), sigma_homo, lo, hi, ctx.config["scale_rule"])
                    with _iteration_log(ctx.out / "logs" / f"{name}.log"):
                        res = reconstruct(
                            *ctx.recon, ctx.protocol, V, ctx.basis(nb), bm, ctx.exp.lmf_config(), tv,
                            snr_estimate=None if math.isinf(snr) else snr, model=ctx.recon_model,
                        )
                    payload = {**res.to_dict(), "method": "bcsr", "n_basis": nb, "scale": s}
                    sigma = res.sigma
                elif method == "ld":
                    s, bm = calibrate_sigma0(V, ctx.u_homo(), sigma_homo, lo, hi, ctx.config["scale_rule"])
                    ld = build_ld(*ctx.recon, ctx.protocol, bm.sigma0, model=ctx.recon_model)
                    alpha = _ld_alpha(ctx, ld, V - ld.V0, ctx.truth_recon() - ld.sigma0)
                    sigma = ld_absolute(ld, V, alpha)
                    payload = {"method": "ld", "alpha_reg": alpha, "sigma": sigma.tolist()}
                else:
                    s, bm = calibrate_sigma0(V, ctx.u_homo(), sigma_homo, lo, hi, ctx.config["scale_rule"])
                    opts = ctx.config["gn_l2"]
                    weight = opts.get("weight")
                    if weight is None:
                        J0 = ctx.recon_model.jacobian(bm.sigma0)
                        weight = default_gn_weight(J0, opts.get("weight_rel", 1e-2))
                    g = gn_l2_reconstruct(
                        *ctx.recon, ctx.protocol, V, bm.sigma0, weight, opts.get("iters", 20),
                        model=ctx.recon_model,
                    )
                    sigma = g.sigma
                    payload = {
                        "method": "gn_l2", "weight": weight, "sigma": sigma.tolist(),
                        "objective_history": g.objective_history, "n_iter": g.n_iter,
                        "termination_reason": g.termination_reason,
                    }
                payload.update(meta, status="ok")
                _save_result(ctx, name, payload, {"sigma": sigma})
            except (ForwardError, FloatingPointError, np.linalg.LinAlgError) as exc:
                logger.error("%s failed: %s", name, exc)
                _dump(ctx.out / "results" / f"{name}.json", {**meta, "method": method, "status": f"failed: {exc}"})
                failures.append(name)
    return failures


def _reconstruct_difference(ctx: Context, tag: str, snr: float, seed: int) -> list[str]:
    data = _load_dataset(ctx, tag)
    v_base = np.asarray(data["baseline"]["V_noisy"])
    frames = [np.asarray(f["V_noisy"]) for f in data["frames"]]
    meta = {"case": ctx.config["case"], "snr": None if math.isinf(snr) else snr, "seed": seed}
    lo, hi = ctx.exp.bounds
    failures = []
    nb = ctx.exp.n_basis_values(ctx.recon[0].n_nodes)[0]
    # the baseline conductivity shared by warm-started BC-SR and LD
    if "bcsr" in ctx.config["methods"]:
        with _iteration_log(ctx.out / "logs" / f"bcsr_{tag}_baseline.log"):
            sigma_base = _bcsr_absolute(ctx, v_base, nb)[0].sigma
    else:
        sigma_homo = np.full(ctx.recon[0].n_nodes, ctx.config["sigma_homo"])
        sigma_base = calibrate_sigma0(
            v_base, ctx.u_homo(), sigma_homo, lo, hi, ctx.config["scale_rule"]
        )[1].sigma0
    for method in ctx.config["methods"]:
        name = f"{method}_{tag}"
        try:
            deltas = []
            if method == "bcsr":
                bm_w = warm_start(sigma_base, lo, hi)
                for i, v in enumerate(frames):
                    with _iteration_log(ctx.out / "logs" / f"{name}_frame{i}.log"):
                        r = reconstruct(
                            *ctx.recon, ctx.protocol, v, ctx.basis(nb), bm_w, ctx.exp.lmf_config(),
                            ctx.exp.tv_config(), None if math.isinf(snr) else snr, model=ctx.recon_model,
                        )
                    deltas.append(r.sigma - sigma_base)
            elif method == "ld":
                ld = build_ld(*ctx.recon, ctx.protocol, sigma_base, model=ctx.recon_model)
                if not np.array_equal(ld.sigma0, sigma_base):
                    raise GuardError("LD and BC-SR baselines differ")
                alpha = ctx.config["ld"].get("alpha_reg", ld.alpha_reg)
                deltas = [ld_reconstruct(ld, v - v_base, alpha) for v in frames]
            else:
                logger.warning("gn_l2 has no difference mode; skipped")
                continue
            payload = {**meta, "method": method, "status": "ok", "n_basis": nb,
                       "sigma_baseline": sigma_base.tolist(), "delta_sigma": [d.tolist() for d in deltas]}
            _save_result(ctx, name, payload, {f"delta_{i}": d for i, d in enumerate(deltas)})
        except (ForwardError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.error("%s failed: %s", name, exc)
            _dump(ctx.out / "results" / f"{name}.json", {**meta, "method": method, "status": f"failed: {exc}"})
            failures.append(name)
    return failures


def _reconstruct_point(ctx: Context, tag: str, snr: float, seed: int) -> list[str]:
    if ctx.config["mode"] == "difference":
        return _reconstruct_difference(ctx, tag, snr, seed)
    return _reconstruct_absolute(ctx, tag, snr, seed)


def run_reconstruct(ctx: Context, jobs: int = 1) -> None:
    (ctx.out / "results").mkdir(parents=True, exist_ok=True)
    failures = [f for fl in _grid(ctx, "_reconstruct_point", ctx.tags(), jobs) for f in fl]
    if failures:
        raise SolverFailure(f"{len(failures)} run(s) failed: {', '.join(failures)}")


def _result_files(ctx: Context) -> list[Path]:
    files = sorted((ctx.out / "results").glob("*.json"))
    if not files:
        raise ConfigError(f"no results below {ctx.out / 'results'}; run the reconstruct stage first")
    return files


def run_evaluate(ctx: Context, inject_truth: bool = False) -> list[MetricReport]:
    mopts = ctx.config["metrics"]
    mesh = ctx.recon[0]
    reports = []
    summary = {}
    if ctx.config["mode"] == "difference":
        left, right = lung_masks(ctx.exp.case, mesh)
        truth_frames = _difference_frames(ctx, "recon")
        peak_truth = truth_frames[int(np.argmax([-d.sum() for d in truth_frames]))]
    else:
        truth = ctx.truth_recon()
    for path in _result_files(ctx):
        res = json.loads(path.read_text())
        if res.get("status") != "ok":
            continue
        label = res["method"] + (f"[nb={res['n_basis']}]" if res["method"] == "bcsr" and "n_basis" in res else "")
        meta = {"case": res["case"], "method": label, "snr": res["snr"], "seed": res["seed"]}
        if ctx.config["mode"] == "difference":
            frames = [np.asarray(d) for d in res["delta_sigma"]]
            series = ventilation_series(mesh, frames, left, right)
            write_ventilation_csv(ctx.out / f"ventilation_{path.stem}.csv", series)
            rep = compute_metrics(peak_truth, frames[series.peak], mesh, **mopts, **meta)
            summary.setdefault(label, {}).setdefault("right_fraction", []).append(series.right_fraction)
        else:
            rep = compute_metrics(truth, np.asarray(res["sigma"]), mesh, **mopts, **meta)
        reports.append(rep)
    if inject_truth:
        ref = peak_truth if ctx.config["mode"] == "difference" else truth
        reports.append(compute_metrics(ref, ref, mesh, **mopts, case=ctx.config["case"], method="truth"))
    write_metrics_csv(ctx.out / "metrics.csv", reports)
    for rep in reports:
        key = f"{rep.meta['method']}@snr={rep.meta.get('snr')}"
        bucket = summary.setdefault(key, {})
        for m in ("ssim", "cc", "rmse"):
            bucket.setdefault(m, []).append(rep.__dict__[m])
    table = {}
    for key, vals in summary.items():
        table[key] = {}
        for m, v in vals.items():
            arr = np.asarray(v, dtype=float)
            table[key][m] = {"mean": float(np.mean(arr)), "std": float(np.std(arr)), "n": int(arr.size)}
    _dump(ctx.out / "summary.json", table)
    return reports


def run_export_vtk(ctx: Context) -> None:
    d = ctx.out / "vtk"
    d.mkdir(parents=True, exist_ok=True)
    mesh = ctx.recon[0]
    for path in _result_files(ctx):
        res = json.loads(path.read_text())
        if res.get("status") != "ok":
            continue
        if "sigma" in res:
            fields = {"sigma": res["sigma"]}
            if ctx.config["mode"] == "absolute":
                fields["truth"] = ctx.truth_recon()
        else:
            fields = {f"delta_{i}": v for i, v in enumerate(res["delta_sigma"])}
        write_vtk(d / f"{path.stem}.vtk", mesh, fields)


def run_pipeline(ctx: Context, jobs: int = 1) -> None:
    run_mesh(ctx)
    run_basis(ctx)
    run_simulate(ctx, jobs)
    failure = None
    try:
        run_reconstruct(ctx, jobs)
    except SolverFailure as exc:
        failure = exc
    run_evaluate(ctx)
    if ctx.config["export_vtk"]:
        run_export_vtk(ctx)
    if failure is not None:
        raise failure


# -- worker pool -------------------------------------------------------------------------

_WORKER_CTX: dict = {}


def _worker(args):
    fn, config, out, point = args
    key = (json.dumps(config, sort_keys=True), str(out))
    if key not in _WORKER_CTX:
        _WORKER_CTX[key] = Context(config, out)
    return globals()[fn](_WORKER_CTX[key], *point)


def _grid(ctx: Context, fn: str, points, jobs: int) -> list:
    if jobs <= 1 or len(points) <= 1:
        return [globals()[fn](ctx, *p) for p in points]
    args = [(fn, ctx.config, ctx.out, p) for p in points]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_worker, args))


# -- entry point -------------------------------------------------------------------------

STAGES = ("mesh", "basis", "simulate", "reconstruct", "evaluate", "pipeline", "export-vtk")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcsr-eit", description="BC-SR EIT reconstruction experiments")
    sub = p.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage)
        sp.add_argument("--config", required=True, help="experiment JSON")
        sp.add_argument("--out", default="bcsr_out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for grid points")
        sp.add_argument("--seed-override", type=int, default=None, help="replace the seed list by one seed")
        sp.add_argument("--verbose", action="store_true")
        if stage == "evaluate":
            sp.add_argument("--inject-truth", action="store_true", help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    for h in logging.getLogger().handlers:
        h.setLevel(level)  # per-run iteration logs raise the recon logger to INFO
    try:
        config = load_config(args.config)
        if args.seed_override is not None:
            config["seeds"] = [args.seed_override]
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        ctx = Context(config, Path(args.out))
        ctx.out.mkdir(parents=True, exist_ok=True)
        stage = args.stage
        if stage == "mesh":
            run_mesh(ctx)
        elif stage == "basis":
            run_basis(ctx)
        elif stage == "simulate":
            run_simulate(ctx, args.jobs)
        elif stage == "reconstruct":
            run_reconstruct(ctx, args.jobs)
        elif stage == "evaluate":
            run_evaluate(ctx, inject_truth=args.inject_truth)
        elif stage == "export-vtk":
            run_export_vtk(ctx)
        else:
            run_pipeline(ctx, args.jobs)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GuardError, MeshError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (SolverFailure, ForwardError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
