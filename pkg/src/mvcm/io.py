"""CSV ingestion of functional datasets and JSON/CSV serialization of results.

Responses are long format with header ``subject_id,response_index,grid_position,value``
where ``grid_position`` is the location in [0, 1]. Covariates are wide with
header ``subject_id,x1,...,xp``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .coefficients import CoefficientFit
from .data import FunctionalDataset, validate_dataset
from .fpca import FunctionalPCA
from .inference import GlobalTestResult, LinearHypothesis
from .smoothing import IndividualCurves

RESPONSE_HEADER = ["subject_id", "response_index", "grid_position", "value"]
MAX_GAPS_REPORTED = 10


class IngestError(ValueError):
    pass


def _read_rows(path, required: list) -> tuple[list, list]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise IngestError(f"{path}: missing columns {missing}")
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    return header, rows


def ingest(responses_path, covariates_path, return_ids: bool = False):
    """Join the two CSV files into a validated :class:`FunctionalDataset`.

    Subjects keep their order of first appearance in the responses file;
    response indices are sorted numerically. With ``return_ids`` the subject
    ids and response labels are returned as well.
    """
    header, rows = _read_rows(responses_path, RESPONSE_HEADER)
    col = {name: header.index(name) for name in RESPONSE_HEADER}
    cells: dict = {}
    subjects: list = []
    positions_by_subject: dict = {}
    for lineno, row in enumerate(rows, start=2):
        try:
            sid = row[col["subject_id"]].strip()
            rj = int(row[col["response_index"]])
            pos = float(row[col["grid_position"]])
            val = float(row[col["value"]])
        except (ValueError, IndexError) as exc:
            raise IngestError(f"{responses_path}:{lineno}: cannot parse row {row!r}") from exc
        key = (sid, rj, pos)
        if key in cells:
            raise IngestError(f"duplicate cell for subject {sid}, response {rj}, grid position {pos!r}")
        cells[key] = val
        if sid not in positions_by_subject:
            subjects.append(sid)
            positions_by_subject[sid] = set()
        positions_by_subject[sid].add(pos)
    if not subjects:
        raise IngestError(f"{responses_path}: no response rows")

    grid = sorted(positions_by_subject[subjects[0]])
    grid_set = set(grid)
    for sid in subjects[1:]:
        extra = positions_by_subject[sid] - grid_set
        if extra:
            raise IngestError(f"grid mismatch: subject {sid} has positions {sorted(extra)[:MAX_GAPS_REPORTED]} "
                              f"not on the grid of subject {subjects[0]}")
    responses = sorted({rj for (_, rj, _) in cells})

    gaps = []
    for sid in subjects:
        for rj in responses:
            for pos in grid:
                if (sid, rj, pos) not in cells:
                    gaps.append((sid, rj, pos))
    if gaps:
        sid, rj, _ = gaps[0]
        listing = "; ".join(f"subject {s}, response {r}, position {p!r}" for s, r, p in gaps[:MAX_GAPS_REPORTED])
        raise IngestError(f"incomplete grid for subject {sid}, response {rj} ({len(gaps)} missing cells: {listing})")

    y = np.empty((len(subjects), len(responses), len(grid)))
    for i, sid in enumerate(subjects):
        for j, rj in enumerate(responses):
            y[i, j] = [cells[(sid, rj, pos)] for pos in grid]

    cheader, crows = _read_rows(covariates_path, ["subject_id"])
    xcols = [k for k, name in enumerate(cheader) if name != "subject_id"]
    if not xcols:
        raise IngestError(f"{covariates_path}: no covariate columns")
    sidx = cheader.index("subject_id")
    cov: dict = {}
    for lineno, row in enumerate(crows, start=2):
        sid = row[sidx].strip()
        if sid in cov:
            raise IngestError(f"duplicate covariate row for subject {sid}")
        try:
            cov[sid] = [float(row[k]) for k in xcols]
        except (ValueError, IndexError) as exc:
            raise IngestError(f"{covariates_path}:{lineno}: cannot parse row {row!r}") from exc
    orphan = [s for s in cov if s not in positions_by_subject]
    if orphan:
        raise IngestError(f"join error: subject {orphan[0]} has covariates but no responses")
    lacking = [s for s in subjects if s not in cov]
    if lacking:
        raise IngestError(f"join error: subject {lacking[0]} has responses but no covariates")
    x = np.array([cov[s] for s in subjects])

    data = validate_dataset(np.array(grid), y, x)
    if return_ids:
        return data, subjects, responses
    return data


def emit(data: FunctionalDataset, responses_path, covariates_path, subject_ids=None,
         response_labels=None) -> None:
    """Write ``data`` in the format :func:`ingest` reads; floats round-trip exactly."""
    sids = [str(i + 1) for i in range(data.n)] if subject_ids is None else [str(s) for s in subject_ids]
    labels = list(range(1, data.J + 1)) if response_labels is None else list(response_labels)
    with open(responses_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESPONSE_HEADER)
        for i, sid in enumerate(sids):
            for j, rj in enumerate(labels):
                for m, pos in enumerate(data.grid):
                    w.writerow([sid, rj, repr(float(pos)), repr(float(data.y[i, j, m]))])
    with open(covariates_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id"] + [f"x{k + 1}" for k in range(data.p)])
        for i, sid in enumerate(sids):
            w.writerow([sid] + [repr(float(v)) for v in data.x[i]])


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def estimates_payload(fit: CoefficientFit) -> dict:
    return {
        "eval_points": fit.eval_points.tolist(),
        "kernel": fit.kernel.value,
        "bandwidths": fit.bandwidths.tolist(),
        "pilot_factor": fit.pilot_factor,
        "b_hat": fit.b_hat.tolist(),
        "bias_hat": fit.bias_hat.tolist(),
        "cv_tables": {str(j): t.as_dict() for j, t in fit.cv_tables.items()},
        "diagnostics": {k: (v if not isinstance(v, dict) else {str(a): b for a, b in v.items()})
                        for k, v in fit.diagnostics.items()},
    }


def write_eta_csv(curves: IndividualCurves, path, subject_ids=None, response_labels=None) -> None:
    n, J, M = curves.eta_hat.shape
    sids = [str(i + 1) for i in range(n)] if subject_ids is None else subject_ids
    labels = list(range(1, J + 1)) if response_labels is None else response_labels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "response_index", "grid_position", "eta", "eps"])
        for i in range(n):
            for j in range(J):
                for m in range(M):
                    w.writerow([sids[i], labels[j], repr(float(curves.grid[m])),
                                repr(float(curves.eta_hat[i, j, m])), repr(float(curves.eps_hat[i, j, m]))])


def fpca_payload(result: FunctionalPCA, curves: IndividualCurves) -> dict:
    out = {"bandwidths_h2": curves.bandwidths.tolist(), "responses": []}
    for eig in result.systems:
        L = eig.n_components
        out["responses"].append({
            "response": eig.response,
            "n_components": L,
            "eigenvalues": eig.retained_values.tolist(),
            "energy": eig.energy[:L].tolist(),
            "total_variance": float(eig.eigenvalues.sum()),
            "clipped_negative": eig.n_clipped,
        })
    return out


def write_fpca_csv(result: FunctionalPCA, path) -> None:
    grid = result.covariance.grid
    cols, names = [], []
    for eig in result.systems:
        for l in range(eig.n_components):
            names.append(f"psi_{eig.response + 1}_{l + 1}")
            cols.append(eig.eigenfunctions[l])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_position"] + names)
        for m, s in enumerate(grid):
            w.writerow([repr(float(s))] + [repr(float(c[m])) for c in cols])


def write_bands_csv(bands: list, path, response_labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["response_index", "coefficient_index", "alpha", "critical_value", "grid_position",
                    "estimate", "lower", "upper"])
        for b in bands:
            rj = b.j + 1 if response_labels is None else response_labels[b.j]
            for e, s in enumerate(b.points):
                w.writerow([rj, b.l + 1, repr(b.alpha), repr(b.critical_value), repr(float(s)),
                            repr(float(b.estimate[e])), repr(float(b.lower[e])), repr(float(b.upper[e]))])


def read_hypothesis(path, eval_points=None) -> LinearHypothesis:
    """JSON ``{"C": [[...]], "b0": "zero" | [[...]], "b0_points": [...]}``.

    ``b0`` given as a table without ``b0_points`` is taken to be on ``eval_points``.
    """
    parsed = json.loads(Path(path).read_text())
    if "C" not in parsed:
        raise ValueError(f"{path}: hypothesis needs a 'C' matrix")
    b0 = parsed.get("b0", "zero")
    if isinstance(b0, str):
        if b0 != "zero":
            raise ValueError(f"{path}: b0 must be 'zero' or a table")
        return LinearHypothesis(np.array(parsed["C"], dtype=float))
    points = parsed.get("b0_points", eval_points)
    return LinearHypothesis(np.array(parsed["C"], dtype=float), np.array(b0, dtype=float), points)


def global_test_payload(result: GlobalTestResult, hyp: LinearHypothesis) -> dict:
    out = result.to_dict()
    out["C"] = hyp.C.tolist()
    out["b0"] = "zero" if hyp.b0 is None else hyp.b0.tolist()
    return out


def write_rows_csv(rows: list, path) -> None:
    """Write a list of dicts sharing the same keys, floats in round-trip form."""
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows)


__all__ = ["IngestError", "ingest", "emit", "dump_json", "sha256_file", "estimates_payload",
           "write_eta_csv", "fpca_payload", "write_fpca_csv", "write_bands_csv", "read_hypothesis",
           "global_test_payload", "write_rows_csv"]
