"""Stage orchestration: fit -> synthesize -> verify -> simulate -> export.

Every stage records the SHA-256 digests of its inputs inside the
artifact it writes, and every consumer stage recomputes those digests
before running, so a stale artifact (for example a bundle fitted from a
since-edited gait file) aborts the pipeline instead of silently feeding
the next stage.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gait as gait_mod
from . import manifold as man_mod
from .approx import (build_bundle, load_bundle, report_digest, save_bundle,
                     validate_polynomial_data)
from .model import RobotModel, load_model, nominal_model, write_model
from .regulator import PitchReference, RegulatorConfig
from .simulate import SimConfig, SimTrace, tracking_experiment
from .synthesis import (SynthesisConfig, ViabilityCertificate, alternate,
                        simulate_labels, stitch_pieces)

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "Pipeline",
    "file_digest",
    "parse_reference",
]


class PipelineError(RuntimeError):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_digest(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=float).encode()).hexdigest()


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the pipeline stages need, in one serializable place.

    ``model_path``/``gait_path`` of ``None`` select the built-in model
    and generated stride.
    """

    out_dir: str = "artifacts"
    model_path: str | None = None
    gait_path: str | None = None
    seed: int = 20260826

    # fit stage
    grid_counts: tuple = (12, 12, 12, 12)
    dynamics_degree: int = 3
    input_degree: int = 5
    error_degree: int = 2
    n_calibrate: int = 200000
    n_validate: int = 1000000

    # synthesis stage
    n_pieces: int = 4
    barrier_degree: int = 4
    max_alternations: int = 16
    sdp_tol: float = 1e-7
    sdp_max_iter: int = 200

    # control / simulation
    epsilon: float = 0.1
    kp: float = 25.0
    kd: float = 10.0
    n_strides: int = 10

    # session service
    host: str = "127.0.0.1"
    port: int = 8765
    rate_hz: float = 60.0
    real_time_factor: float = 1.0

    @property
    def bundle_path(self) -> str:
        return os.path.join(self.out_dir, "walker_bundle.txt")

    @property
    def certificate_path(self) -> str:
        return os.path.join(self.out_dir, "walker_cert.json")

    def regulator_config(self) -> RegulatorConfig:
        return RegulatorConfig(epsilon=self.epsilon, kp=self.kp, kd=self.kd)

    def synthesis_config(self) -> SynthesisConfig:
        return SynthesisConfig(
            n_pieces=self.n_pieces, barrier_degree=self.barrier_degree,
            max_alternations=self.max_alternations, sdp_tol=self.sdp_tol,
            sdp_max_iter=self.sdp_max_iter, seed=self.seed)

    def save(self, path) -> None:
        payload = {"format": "pipeline-config/1", **asdict(self)}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.pop("format", None) != "pipeline-config/1":
            raise PipelineError(f"{path}: not a pipeline config file")
        if "grid_counts" in payload:
            payload["grid_counts"] = tuple(payload["grid_counts"])
        return cls(**payload)


def parse_reference(text: str) -> PitchReference:
    """Parse a reference description.

    Accepts ``constant:<alpha>``, ``ramp:<alpha>:<rise_time>``, or a
    path to a saved reference file.
    """
    if text.startswith("constant:"):
        return PitchReference.constant(float(text.split(":")[1]))
    if text.startswith("ramp:"):
        _, target, rise = text.split(":")
        return PitchReference.ramp(float(target), float(rise))
    if os.path.exists(text):
        return PitchReference.load(text)
    raise PipelineError(
        f"unrecognized reference {text!r}; expected constant:<alpha>, "
        "ramp:<alpha>:<rise_time>, or a reference file path")


class Pipeline:
    """Executes the staged commands against a configuration."""

    def __init__(self, config: PipelineConfig, log=None):
        self.config = config
        self._log = log
        self._manifold = None

    def say(self, msg):
        if self._log:
            self._log(msg)

    # -- inputs -------------------------------------------------------

    def model(self) -> RobotModel:
        if self.config.model_path:
            return load_model(self.config.model_path)
        return nominal_model()

    def manifold(self):
        if self._manifold is None:
            model = self.model()
            if self.config.gait_path:
                gait = gait_mod.load_gait(self.config.gait_path, model)
            else:
                gait = gait_mod.ingest(
                    *gait_mod.generate_spline_gait(model), model)
            self._manifold = man_mod.build_manifold(model, gait)
        return self._manifold

    def input_digests(self) -> dict:
        """Digests of the fit stage's inputs (model, gait, fit config)."""
        if self.config.model_path:
            model_digest = file_digest(self.config.model_path)
        else:
            tmp = os.path.join(self.config.out_dir, ".model_nominal.txt")
            os.makedirs(self.config.out_dir, exist_ok=True)
            write_model(nominal_model(), tmp)
            model_digest = file_digest(tmp)
            os.remove(tmp)
        if self.config.gait_path:
            gait_digest = file_digest(self.config.gait_path)
        else:
            gait_digest = "builtin-spline-stride"
        fit_fields = {k: getattr(self.config, k) for k in
                      ("grid_counts", "dynamics_degree", "input_degree",
                       "error_degree", "n_calibrate", "seed")}
        return {"model": model_digest, "gait": gait_digest,
                "fit_config": _json_digest(fit_fields)}

    # -- stages -------------------------------------------------------

    def cmd_fit(self, tables=None) -> str:
        """Fit, validate, and persist the polynomial bundle."""
        cfg = self.config
        os.makedirs(cfg.out_dir, exist_ok=True)
        man = self.manifold()
        self.say(f"fitting bundle on a {cfg.grid_counts} grid "
                 f"(input degree {cfg.input_degree})")
        bundle = build_bundle(
            man, grid_counts=cfg.grid_counts,
            dynamics_degree=cfg.dynamics_degree,
            input_degree=cfg.input_degree, error_degree=cfg.error_degree,
            n_calibrate=cfg.n_calibrate, seed=cfg.seed, tables=tables)
        self.say(f"validating at {cfg.n_validate} random points")
        report = validate_polynomial_data(man, bundle,
                                          n_random=cfg.n_validate,
                                          seed=cfg.seed + 1)
        report_path = os.path.join(cfg.out_dir, "bundle_validation.json")
        with open(report_path, "w") as fh:
            json.dump(report, fh, indent=1, default=float)
        if not report["passed"]:
            raise PipelineError(
                f"bundle validation failed; report at {report_path}")
        save_bundle(bundle, cfg.bundle_path,
                    validation_digest=report_digest(report),
                    provenance=self.input_digests())
        self.say(f"bundle written to {cfg.bundle_path}")
        return cfg.bundle_path

    def load_checked_bundle(self):
        cfg = self.config
        if not os.path.exists(cfg.bundle_path):
            raise PipelineError(
                f"no bundle at {cfg.bundle_path}; run the fit stage first")
        bundle = load_bundle(cfg.bundle_path)
        recorded = bundle.stats.get("provenance")
        if recorded is not None and recorded != self.input_digests():
            raise PipelineError(
                f"bundle {cfg.bundle_path} is stale: its recorded input "
                "digests do not match the current model/gait/config")
        return bundle

    def cmd_synthesize(self) -> str:
        cfg = self.config
        bundle = self.load_checked_bundle()
        cert = alternate(bundle, cfg.synthesis_config(), log=self._log)
        report = stitch_pieces(cert)
        if not report["passed"]:
            raise PipelineError(
                f"inter-piece stitching failed: {report}")
        cert.provenance = {"bundle": file_digest(cfg.bundle_path),
                           "stitch": report}
        cert.save(cfg.certificate_path)
        self.say(f"certificate written to {cfg.certificate_path}")
        return cfg.certificate_path

    def cmd_verify(self, n_random: int = 100000) -> dict:
        """Re-verify a persisted certificate: provenance digests, the
        recorded Gram-level summary, fresh inter-piece stitching, and a
        sampling gate that every certified state has an admissible
        certified control."""
        cfg = self.config
        cert = ViabilityCertificate.load(cfg.certificate_path)
        report = {"passed": True, "checks": {}}

        def check(name, ok, detail=None):
            report["checks"][name] = {"passed": bool(ok), "detail": detail}
            report["passed"] &= bool(ok)

        recorded = cert.provenance.get("bundle")
        bundle_digest = (file_digest(cfg.bundle_path)
                         if os.path.exists(cfg.bundle_path) else None)
        check("bundle-digest", recorded is not None
              and recorded == bundle_digest,
              {"recorded": recorded, "actual": bundle_digest})
        summary = cert.verification
        pa = summary.get("phase_a") or {}
        check("barrier-gram", pa.get("passed", False), pa)
        pb = summary.get("phase_b") or []
        check("controller-gram",
              bool(pb) and all(r and r.get("passed") for r in pb))
        stitch = stitch_pieces(cert, n_random=n_random // 5)
        check("stitching", stitch["passed"], stitch)

        bundle = self.load_checked_bundle() if bundle_digest else None
        if bundle is not None:
            rng = np.random.default_rng(cfg.seed + 2)
            lo = np.array([bundle.box[v][0] for v in
                           ("theta", "theta_dot", "alpha", "alpha_dot")])
            hi = np.array([bundle.box[v][1] for v in
                           ("theta", "theta_dot", "alpha", "alpha_dot")])
            pts = rng.uniform(lo, hi, (n_random, 4))
            inside = cert.contains(pts)
            certified = pts[inside]
            u = cert.control(certified)
            u_lo, u_hi = bundle.bounds.interval(certified)
            bad_u = int(np.sum((u < u_lo - 1e-9) | (u > u_hi + 1e-9)))
            unsafe_hits = int(np.sum(bundle.unsafe.contains(certified)))
            check("certified-control-admissible", bad_u == 0,
                  {"violations": bad_u, "certified": int(inside.sum())})
            check("certified-avoids-unsafe", unsafe_hits == 0,
                  {"hits": unsafe_hits})
            check("nonempty", int(inside.sum()) > 0,
                  {"certified_fraction": float(inside.mean())})
        path = os.path.join(cfg.out_dir, "verify_report.json")
        with open(path, "w") as fh:
            json.dump(report, fh, indent=1, default=float)
        report["path"] = path
        return report

    def cmd_simulate(self, mode: str, reference: str,
                     theta_dot0: float | None = None,
                     n_strides: int | None = None,
                     out_path: str | None = None) -> SimTrace:
        cfg = self.config
        man = self.manifold()
        cert = None
        if mode == "safe":
            cert = ViabilityCertificate.load(cfg.certificate_path)
        ref = parse_reference(reference)
        x0 = None
        if theta_dot0 is not None:
            x0 = man_mod.lift(man, (man.theta_min, theta_dot0, 0.0, 0.0))
        trace = tracking_experiment(
            man, ref, mode, certificate=cert, x0=x0,
            n_strides=n_strides or cfg.n_strides,
            reg_config=cfg.regulator_config())
        if out_path is None:
            os.makedirs(cfg.out_dir, exist_ok=True)
            out_path = os.path.join(cfg.out_dir, f"trace_{mode}.txt")
        trace.metadata["inputs"] = self.input_digests()
        trace.save(out_path)
        self.say(f"{mode} run: outcome {trace.outcome} after "
                 f"{trace.strides} strides -> {out_path}")
        return trace

    def cmd_export_slice(self, alpha: float = 0.0, alpha_dot: float = 0.0,
                         n: int = 101, out_path: str | None = None) -> str:
        """Export the certified-set slice on the phase plane at fixed
        shaping coordinates: barrier value and admissible-input window
        on an n-by-n grid."""
        cfg = self.config
        cert = ViabilityCertificate.load(cfg.certificate_path)
        bundle = (load_bundle(cfg.bundle_path)
                  if os.path.exists(cfg.bundle_path) else None)
        th = np.linspace(*cert.box["theta"], n)
        td = np.linspace(*cert.box["theta_dot"], n)
        TH, TD = np.meshgrid(th, td, indexing="ij")
        pts = np.column_stack([TH.ravel(), TD.ravel(),
                               np.full(TH.size, alpha),
                               np.full(TH.size, alpha_dot)])
        v = cert.barrier(pts)
        cols = [pts[:, 0], pts[:, 1], v]
        names = ["theta", "theta_dot", "v"]
        if bundle is not None:
            u_lo, u_hi = bundle.bounds.interval(pts)
            cols += [u_lo, u_hi]
            names += ["u_min", "u_max"]
        if out_path is None:
            os.makedirs(cfg.out_dir, exist_ok=True)
            out_path = os.path.join(cfg.out_dir, "slice.txt")
        header = {"format": "barrier-slice/1", "alpha": alpha,
                  "alpha_dot": alpha_dot, "n": n,
                  "certificate": file_digest(cfg.certificate_path)}
        with open(out_path, "w") as fh:
            fh.write("# " + json.dumps(header) + "\n")
            fh.write("# " + " ".join(names) + "\n")
            np.savetxt(fh, np.column_stack(cols), fmt="%.12g")
        self.say(f"slice written to {out_path}")
        return out_path
