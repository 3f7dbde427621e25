import dataclasses
import json
import os

import numpy as np
import pytest

from safewalk.pipeline import (Pipeline, PipelineConfig, PipelineError,
                               file_digest, parse_reference)
from safewalk.approx import load_bundle
from safewalk.polynomial import Polynomial
from safewalk.simulate import SimTrace
from safewalk.synthesis import SynthesisConfig, ViabilityCertificate, VARS

# coarse-but-sound settings so the fit stage runs in seconds
FIT_KW = dict(grid_counts=(9, 9, 9, 9), input_degree=4,
              n_calibrate=30000, n_validate=50000)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("pipeline")


@pytest.fixture(scope="module")
def config(workdir):
    return PipelineConfig(out_dir=str(workdir / "artifacts"), **FIT_KW)


@pytest.fixture(scope="module")
def pipe(config):
    return Pipeline(config)


@pytest.fixture(scope="module")
def bundle_path(pipe):
    return pipe.cmd_fit()


# -- config -------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    cfg = PipelineConfig(out_dir="x", grid_counts=(5, 6, 7, 8), seed=42)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    assert PipelineConfig.load(path) == cfg


def test_config_rejects_other_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "something/9"}')
    with pytest.raises(PipelineError, match="not a pipeline config"):
        PipelineConfig.load(path)


def test_parse_reference_forms(tmp_path):
    assert parse_reference("constant:0.25").alpha(3.0) == pytest.approx(0.25)
    ramp = parse_reference("ramp:0.2:1.0")
    assert ramp.alpha(0.0) == pytest.approx(0.0, abs=1e-12)
    assert ramp.alpha(5.0) == pytest.approx(0.2)
    path = tmp_path / "ref.txt"
    ramp.save(path)
    again = parse_reference(str(path))
    assert again.alpha(0.5) == pytest.approx(ramp.alpha(0.5))
    with pytest.raises(PipelineError, match="unrecognized reference"):
        parse_reference("wiggle:1:2:3")


def test_file_digest_is_content_hash(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.write_text("hello")
    b.write_text("hello")
    assert file_digest(a) == file_digest(b)
    b.write_text("hellp")
    assert file_digest(a) != file_digest(b)


# -- fit stage ----------------------------------------------------------


def test_fit_writes_validated_bundle(pipe, bundle_path):
    assert os.path.exists(bundle_path)
    bundle = load_bundle(bundle_path)
    assert bundle.stats["validation_digest"]
    assert bundle.stats["provenance"] == pipe.input_digests()
    report = json.load(open(os.path.join(pipe.config.out_dir,
                                         "bundle_validation.json")))
    assert report["passed"]


def test_fit_is_deterministic(pipe, bundle_path, tmp_path):
    # same config and seed -> byte-identical artifact
    first = open(bundle_path, "rb").read()
    again_cfg = dataclasses.replace(pipe.config, out_dir=str(tmp_path))
    # reuse the already-built manifold to keep the test fast
    again = Pipeline(again_cfg)
    again._manifold = pipe.manifold()
    again_path = again.cmd_fit()
    assert open(again_path, "rb").read() == first


def test_stale_bundle_refused(pipe, bundle_path):
    # synthesizing against a bundle fitted under different inputs aborts
    stale_cfg = dataclasses.replace(pipe.config, input_degree=3)
    stale = Pipeline(stale_cfg)
    with pytest.raises(PipelineError, match="stale"):
        stale.load_checked_bundle()
    # unchanged config passes the digest gate
    assert pipe.load_checked_bundle() is not None


def test_missing_bundle_refused(tmp_path):
    cfg = PipelineConfig(out_dir=str(tmp_path / "empty"))
    with pytest.raises(PipelineError, match="fit stage first"):
        Pipeline(cfg).load_checked_bundle()


# -- simulate stage -------------------------------------------------------


def test_simulate_stage_writes_trace(pipe, workdir):
    out = str(workdir / "trace_naive.txt")
    trace = pipe.cmd_simulate("naive", "constant:0.0", theta_dot0=0.7,
                              n_strides=2, out_path=out)
    assert trace.outcome == "completed"
    back = SimTrace.load(out)
    assert back.strides == 2
    assert back.metadata["inputs"] == pipe.input_digests()


# -- verify / export against a handmade certificate -----------------------


def permissive_certificate(box):
    """One-piece certificate whose barrier is positive everywhere."""
    one = Polynomial(VARS, {(0, 0, 0, 0): 1.0})
    gram = {"passed": True,
            "constraints": {"c": {"min_eig": 0.0, "coeff_residual": 0.0}}}
    th = box["theta"]
    return ViabilityCertificate(
        theta_edges=np.array([th[0], th[1]]), boxes=[dict(box)],
        v_unit=[one], u_unit=[0.0 * one], lam_unit=[one], q_unit=[{}],
        box=dict(box), config=SynthesisConfig(n_pieces=1),
        verification={"phase_a": gram, "phase_b": [gram]})


@pytest.fixture(scope="module")
def cert_path(pipe, bundle_path):
    bundle = load_bundle(bundle_path)
    cert = permissive_certificate(bundle.box)
    cert.provenance = {"bundle": file_digest(bundle_path)}
    cert.save(pipe.config.certificate_path)
    return pipe.config.certificate_path


def test_verify_report_structure(pipe, cert_path):
    report = pipe.cmd_verify(n_random=2000)
    assert os.path.exists(report["path"])
    checks = report["checks"]
    # provenance and recorded Gram summaries check out
    assert checks["bundle-digest"]["passed"]
    assert checks["barrier-gram"]["passed"]
    assert checks["controller-gram"]["passed"]
    assert checks["nonempty"]["passed"]
    # an everything-is-certified barrier cannot really avoid the unsafe
    # set, and the sampling gates catch that
    assert not checks["certified-avoids-unsafe"]["passed"]
    assert not report["passed"]


def test_verify_detects_bundle_drift(pipe, cert_path, bundle_path):
    cert = ViabilityCertificate.load(cert_path)
    cert.provenance = {"bundle": "0" * 64}
    cert.save(cert_path)
    try:
        report = pipe.cmd_verify(n_random=1000)
        assert not report["checks"]["bundle-digest"]["passed"]
    finally:
        cert.provenance = {"bundle": file_digest(bundle_path)}
        cert.save(cert_path)


def test_export_slice(pipe, cert_path, workdir):
    out = str(workdir / "slice.txt")
    path = pipe.cmd_export_slice(alpha=0.0, alpha_dot=0.0, n=21,
                                 out_path=out)
    with open(path) as fh:
        header = json.loads(fh.readline().lstrip("# "))
        names = fh.readline().lstrip("# ").split()
        table = np.loadtxt(fh)
    assert header["format"] == "barrier-slice/1"
    assert names[:3] == ["theta", "theta_dot", "v"]
    assert table.shape == (21 * 21, len(names))
    # permissive certificate: barrier positive on the whole grid
    assert np.all(table[:, 2] > 0)
    # the admissible-input columns come from the fitted bundle
    assert {"u_min", "u_max"} <= set(names)
