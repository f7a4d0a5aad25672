"""CSV ingestion and model persistence.

Model files are an 8-byte little-endian header length, a UTF-8 JSON header,
then row-major little-endian float64 blocks described in the header. Files
are written to a temporary name and renamed, so a failed write leaves no
partial output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .calibrate import CalibratedModel, reduce_columns
from .core import (
    BasisSpec,
    CalibrationSet,
    KernelSpec,
    LipschitzSpec,
    ScoreFunction,
    ValidationError,
    aps_score,
    regularizer_from_dict,
)
from .qr_solver import KernelQrFit, LipschitzQrFit, QrFit

FORMAT = "condcal-model"
FORMAT_VERSION = 1

_X_COL = re.compile(r"^x(\d+)$")
_PI_COL = re.compile(r"^pi_(\d+)$")


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Table:
    """Parsed numeric CSV: covariates plus optional score/response/predictor columns."""

    x: np.ndarray
    score: np.ndarray | None
    y: np.ndarray | None
    mu_hat: np.ndarray | None
    probs: np.ndarray | None

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _float(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not np.isfinite(v):
        raise ValidationError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return v


def read_table(path, require_target: bool = True) -> Table:
    """Read a CSV with header ``x1..xp`` and ``score`` or ``y`` (+ ``mu_hat`` / ``pi_k``).

    Row numbers in error messages count data rows from 1.
    """
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise ValidationError(f"{path}: empty file, header row required") from None
            rows = [r for r in reader if any(c.strip() for c in r)]
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    if len(set(header)) != len(header):
        raise ValidationError(f"{path}: duplicate column names in header")
    xcols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _X_COL.match(h)))
    if not xcols:
        raise ValidationError(f"{path}: no covariate columns; expected x1..xp")
    if [k for k, _ in xcols] != list(range(1, len(xcols) + 1)):
        raise ValidationError(f"{path}: covariate columns must be x1..x{len(xcols)} without gaps")
    pcols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _PI_COL.match(h)))
    if pcols and [k for k, _ in pcols] != list(range(1, len(pcols) + 1)):
        raise ValidationError(f"{path}: probability columns must be pi_1..pi_{len(pcols)} without gaps")
    idx = {h: i for i, h in enumerate(header)}
    if require_target and "score" not in idx and "y" not in idx:
        raise ValidationError(
            f"{path}: missing target column; need 'score', or 'y' with optional 'mu_hat' or 'pi_1..pi_k' "
            f"(found columns {header})"
        )
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    def column(i: int, name: str) -> np.ndarray:
        out = np.empty(len(rows))
        for r, row in enumerate(rows, start=1):
            if i >= len(row) or row[i].strip() == "":
                raise ValidationError(f"row {r}, column {name!r}: missing value")
            out[r - 1] = _float(row[i], r, name)
        return out

    x = np.column_stack([column(i, f"x{k}") for k, i in xcols])
    get = lambda name: column(idx[name], name) if name in idx else None
    probs = None
    if pcols:
        probs = np.column_stack([column(i, f"pi_{k}") for k, i in pcols])
        bad = np.flatnonzero((probs < 0).any(axis=1) | (np.abs(probs.sum(axis=1) - 1.0) > 1e-9))
        if bad.size:
            raise ValidationError(f"row {bad[0] + 1}: class probabilities must be nonnegative and sum to 1")
    return Table(x, get("score"), get("y"), get("mu_hat"), probs)


def table_scores(t: Table, score_kind: str | None = None) -> tuple[np.ndarray, str]:
    """Conformity scores of a table and the score kind they represent.

    A ``score`` column is used as is (kind ``custom`` unless given). With
    ``y`` only, the kind follows from the predictor columns: ``mu_hat``
    gives ``absolute-residual`` by default, ``pi_k`` gives
    ``aps-classification`` with 1-based labels in ``y``, neither gives
    ``identity``.
    """
    if t.score is not None and (score_kind is None or t.y is None):
        return t.score, score_kind or "custom"
    if t.y is None:
        raise ValidationError("table has no 'score' or 'y' column")
    if score_kind is None:
        score_kind = "aps-classification" if t.probs is not None else (
            "absolute-residual" if t.mu_hat is not None else "identity"
        )
    if score_kind == "identity":
        return t.y.copy(), score_kind
    if score_kind in ("absolute-residual", "signed-residual"):
        if t.mu_hat is None:
            raise ValidationError(f"score kind {score_kind} needs a 'mu_hat' column")
        r = t.y - t.mu_hat
        return (np.abs(r) if score_kind == "absolute-residual" else r), score_kind
    if score_kind == "aps-classification":
        if t.probs is None:
            raise ValidationError("aps-classification needs pi_1..pi_k columns")
        k = t.probs.shape[1]
        out = np.empty(t.n)
        for i, (p, lab) in enumerate(zip(t.probs, t.y), start=1):
            if lab != int(lab) or not 1 <= lab <= k:
                raise ValidationError(f"row {i}, column 'y': unknown class label {lab:g} for {k} classes")
            out[i - 1] = aps_score(p, int(lab) - 1)
        return out, score_kind
    raise ValidationError(f"score kind {score_kind!r} cannot be computed from CSV columns")


def read_calibration(path, score_kind: str | None = None) -> tuple[CalibrationSet, str]:
    t = read_table(path)
    s, kind = table_scores(t, score_kind)
    return CalibrationSet(t.x, s, t.y), kind


def write_table(path, x, y=None, mu_hat=None, score=None) -> None:
    """Write covariates and optional columns in the ingestion schema."""
    x = np.asarray(x, dtype=float)
    cols = {f"x{j + 1}": x[:, j] for j in range(x.shape[1])}
    for name, val in (("y", y), ("mu_hat", mu_hat), ("score", score)):
        if val is not None:
            cols[name] = np.asarray(val, dtype=float)
    lines = [",".join(cols)]
    for i in range(x.shape[0]):
        lines.append(",".join(repr(float(c[i])) for c in cols.values()))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


# --------------------------------------------------------------------------
# JSON documents
# --------------------------------------------------------------------------


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def basis_from_dict(d: dict) -> BasisSpec:
    """Basis document: explicit ``columns`` or a ``preset`` (see BasisSpec.from_dict)."""
    return BasisSpec.from_dict(d)


def config_digest(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".condcal-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# Model files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelBundle:
    """What a model file holds: one model, or a lower/upper pair for two-sided sets."""

    models: tuple[CalibratedModel, ...]
    score_kind: str
    alpha: float
    digest: str

    @property
    def two_sided(self) -> bool:
        return len(self.models) == 2


def _fit_blocks(prefix: str, model: CalibratedModel) -> tuple[dict, dict]:
    f = model.base_fit
    meta = {}
    if model.kind == "linear":
        blocks = {
            "beta": f.beta, "eta": f.eta, "vertex_beta": f.vertex_beta,
            "vertex": np.asarray(f.vertex, dtype=float),
        }
        meta = {"duality_gap": f.duality_gap, "objective": f.objective, "basis_rows": list(f.basis_rows)}
    elif model.kind == "kernel":
        blocks = {"gamma": f.gamma, "beta": f.beta, "eta": f.eta, "fitted": f.fitted, "state": f.state.astype(float)}
        meta = {"objective": f.objective, "dual_objective": f.dual_objective, "n_weight": f.n_weight}
    else:
        blocks = {"gamma": f.gamma, "beta": f.beta, "eta": f.eta, "fitted": f.fitted}
        meta = {"objective": f.objective, "lip_value": f.lip_value}
    return {f"{prefix}{k}": np.asarray(v, dtype=float) for k, v in blocks.items()}, meta


def model_header(bundle_models, score_kind: str, alpha: float) -> dict:
    m0 = bundle_models[0]
    kernel = None if m0.kernel is None else m0.kernel.to_dict()
    data_hash = hashlib.sha256(
        np.ascontiguousarray(m0.calib.x, dtype="<f8").tobytes()
        + np.ascontiguousarray(m0.calib.s, dtype="<f8").tobytes()
    ).hexdigest()
    config = {
        "alpha": alpha,
        "basis": m0.basis.to_dict(),
        "kernel": kernel,
        "score_kind": score_kind,
        "two_sided": len(bundle_models) == 2,
        "data_sha256": data_hash,
    }
    return config


def save_model(path, models, score_kind: str, alpha: float) -> str:
    """Write one model (or a (lower, upper) pair) and return the config digest."""
    models = tuple(models)
    config = model_header(models, score_kind, alpha)
    digest = config_digest(config)
    m0 = models[0]
    blocks = {"x": np.asarray(m0.calib.x, float), "s": np.asarray(m0.calib.s, float)}
    fits = []
    for tag, m in zip(("lo_", "hi_") if len(models) == 2 else ("",), models):
        b, meta = _fit_blocks(tag, m)
        blocks.update(b)
        fits.append({"prefix": tag, "level": m.alpha, **meta})
    layout = []
    offset = 0
    payload = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "config": config,
        "config_digest": digest,
        "n": m0.n,
        "p": m0.calib.p,
        "d": m0.d,
        "kind": m0.kind,
        "fits": fits,
        "blocks": layout,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    atomic_write(path, struct.pack("<Q", len(head)) + head + b"".join(payload))
    return digest


def _read_blocks(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read model file {path}: {exc}") from exc
    if len(raw) < 8:
        raise ValidationError(f"{path}: truncated model file")
    (hlen,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt model header") from exc
    if header.get("format") != FORMAT:
        raise ValidationError(f"{path}: not a model file")
    if header.get("version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {header.get('version')}")
    body = raw[8 + hlen :]
    blocks = {}
    for b in header["blocks"]:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        start = b["offset"]
        end = start + 8 * count
        if end > len(body):
            raise ValidationError(f"{path}: block {b['name']!r} runs past the end of the file")
        blocks[b["name"]] = np.frombuffer(body[start:end], dtype="<f8").reshape(b["shape"]).astype(float)
    return header, blocks


def load_model(path) -> ModelBundle:
    header, blocks = _read_blocks(path)
    config = header["config"]
    if config_digest(config) != header["config_digest"]:
        raise ValidationError(f"{path}: config digest mismatch")
    basis = BasisSpec.from_dict(config["basis"])
    kernel = None if config["kernel"] is None else regularizer_from_dict(config["kernel"])
    x = blocks["x"]
    s = blocks["s"]
    full = basis.evaluate(x)
    keep, combo = reduce_columns(full)
    phi = full if keep is None else np.ascontiguousarray(full[:, list(keep)])
    phi.setflags(write=False)
    gram = kernel.gram(x) if isinstance(kernel, KernelSpec) else None
    models = []
    for fit_meta in header["fits"]:
        tag = fit_meta["prefix"]
        g = lambda name: blocks[f"{tag}{name}"]
        if kernel is None:
            fit = QrFit(
                beta=g("beta"), eta=g("eta"), basis_rows=tuple(fit_meta["basis_rows"]),
                duality_gap=fit_meta["duality_gap"], objective=fit_meta["objective"],
                vertex=tuple(int(v) for v in g("vertex")), vertex_beta=g("vertex_beta"),
            )
        elif isinstance(kernel, LipschitzSpec):
            fit = LipschitzQrFit(
                gamma=g("gamma"), beta=g("beta"), eta=g("eta"), lip_value=fit_meta["lip_value"],
                objective=fit_meta["objective"], fitted=g("fitted"), lam=kernel.lam,
            )
        else:
            fit = KernelQrFit(
                gamma=g("gamma"), beta=g("beta"), eta=g("eta"), objective=fit_meta["objective"],
                dual_objective=fit_meta["dual_objective"], fitted=g("fitted"),
                state=g("state").astype(np.int8), lam=kernel.lam, n_weight=fit_meta["n_weight"],
            )
        models.append(CalibratedModel(CalibrationSet(x, s), basis, fit_meta["level"], fit, phi, kernel, gram, keep, combo))
    return ModelBundle(tuple(models), config["score_kind"], config["alpha"], header["config_digest"])


def score_function(kind: str) -> ScoreFunction:
    if kind == "custom":
        return ScoreFunction("custom", custom=lambda x, y: float(y))
    return ScoreFunction(kind)

