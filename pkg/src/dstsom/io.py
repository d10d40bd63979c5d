"""CSV schemas, JSON run configuration and the fit archive."""
from __future__ import annotations

import copy
import csv
import datetime as dt
import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .design import ControlEvent, Habitat, ModelSpec, Observation
from .inference import DICResult, FitResult, GaussianApprox
from .spacetime import PriorKind

OBS_COLUMNS = ("site_id", "x_km", "y_km", "year", "species", "score", "habitat", "access_km")
CONTROL_COLUMNS = ("species", "site_id", "date")
GRID_COLUMNS = ("x_km", "y_km", "habitat", "access_km")


class DataError(ValueError):
    """Input files or configuration violate their schema."""


def fmt(x: float) -> str:
    """Fixed six significant digits, locale independent."""
    if not np.isfinite(x):
        raise ValueError(f"refusing to write non-finite value {x}")
    out = f"{float(x):.6g}"
    return "0" if out == "-0" else out


# ---------------------------------------------------------------------------
# atomic output


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write_bytes(path, buf.getvalue().encode())


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# readers


def _reader(path, required):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    fh = open(path, newline="")
    reader = csv.DictReader(fh)
    missing = [c for c in required if c not in (reader.fieldnames or ())]
    if missing:
        fh.close()
        raise DataError(f"{path}: missing columns {missing}")
    return fh, reader


def read_observations(path) -> list[Observation]:
    fh, reader = _reader(path, OBS_COLUMNS)
    out = []
    with fh:
        for line, row in enumerate(reader, start=2):
            try:
                out.append(
                    Observation(
                        row["site_id"],
                        (float(row["x_km"]), float(row["y_km"])),
                        int(row["year"]),
                        row["species"],
                        int(row["score"]),
                        Habitat(row["habitat"].strip().lower()),
                        float(row["access_km"]),
                    )
                )
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    if not out:
        raise DataError(f"{path}: no observations")
    return out


def read_controls(path) -> list[ControlEvent]:
    if path is None:
        return []
    fh, reader = _reader(path, CONTROL_COLUMNS)
    out = []
    with fh:
        for line, row in enumerate(reader, start=2):
            try:
                out.append(ControlEvent(row["species"], row["site_id"], dt.date.fromisoformat(row["date"].strip())))
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    return out


@dataclass
class PredictionGrid:
    locations: np.ndarray
    habitat: list[Habitat]
    access_km: np.ndarray
    ctrl: np.ndarray
    d: np.ndarray


def read_grid(path) -> PredictionGrid:
    fh, reader = _reader(path, GRID_COLUMNS)
    locs, hab, acc, ctrl, d = [], [], [], [], []
    with fh:
        for line, row in enumerate(reader, start=2):
            try:
                locs.append((float(row["x_km"]), float(row["y_km"])))
                hab.append(Habitat(row["habitat"].strip().lower()))
                acc.append(float(row["access_km"]))
                ctrl.append(int(row.get("ctrl") or 0))
                d.append(float(row.get("d") or 0.0))
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    if not locs:
        raise DataError(f"{path}: empty prediction grid")
    return PredictionGrid(np.array(locs), hab, np.array(acc), np.array(ctrl), np.array(d))


def write_observations(path, observations: Iterable[Observation]) -> None:
    rows = (
        (o.site_id, float(o.location[0]), float(o.location[1]), o.year, o.species, o.score, o.habitat.value, float(o.access_km))
        for o in observations
    )
    write_csv(path, OBS_COLUMNS, rows)


def write_controls(path, events: Iterable[ControlEvent]) -> None:
    write_csv(path, CONTROL_COLUMNS, ((e.species, e.site_id, e.date.isoformat()) for e in events))


# ---------------------------------------------------------------------------
# configuration

DEFAULT_CONFIG = {
    "observations": "observations.csv",
    "controls": "controls.csv",
    "prediction_grid": None,
    "species": None,
    "model": {
        "C": 5,
        "labels": None,
        "link": "cloglog",
        "variant": "M3",
        "sigma_prior": None,  # P(sigma > 1/q) = 0.05 when omitted
        "range_prior": {"u": 10.0, "alpha": 0.05},
        "rho_prior": {"u": 0.5, "alpha": 2.0 / 3.0},
        "beta_prior_variance": 1000.0,
        "max_knots": None,
        "reference_date": "07-01",
    },
    "grid": {"z": [-2, -1, 0, 1, 2], "dic_nodes": 40},
    "samples": 2000,
    "prediction_years": None,
    "seed": 0,
    "output_dir": "out",
    "simulation": {
        "sigma": 1.0,
        "range": 5.0,
        "rho": 0.9,
        "beta_cut": [0.5, 0.0, 0.5, 1.0],
        "beta_global": [-0.3, 0.1, 0.15, 0.4, 0.2],
        "n_sites": 40,
        "extent_km": 20.0,
        "years": [2019, 2020, 2021, 2022, 2023],
        "n_obs": 600,
        "p_forest": 0.4,
        "p_control": 0.15,
        "species": "sim",
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            user = json.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"{path}: config not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(_merge(DEFAULT_CONFIG, user), path.parent)

    def path(self, key: str) -> Path | None:
        val = self.raw.get(key)
        if val is None:
            return None
        p = Path(val)
        return p if p.is_absolute() else self.base_dir / p

    def model_spec(self, variant: str | None = None) -> ModelSpec:
        m = dict(self.raw["model"])
        month, day = (int(v) for v in str(m.pop("reference_date")).split("-"))
        d = {
            "C": m["C"],
            "labels": m.get("labels"),
            "link": m["link"],
            "variant": variant or m["variant"],
            "beta_prior_variance": m["beta_prior_variance"],
            "max_knots": m["max_knots"],
            "reference_month_day": (month, day),
        }
        for key, kind in (("sigma_prior", PriorKind.SD), ("range_prior", PriorKind.RANGE2D), ("rho_prior", PriorKind.COR1)):
            if m.get(key) is not None:
                d[key] = {"kind": kind.value, **m[key]}
        try:
            return ModelSpec.from_dict(d)
        except (ValueError, KeyError) as exc:
            raise DataError(f"invalid model configuration: {exc}") from None

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])


def file_digest(path) -> str:
    if path is None or not Path(path).exists():
        return ""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def fit_hash(config: RunConfig, spec: ModelSpec) -> str:
    """Identifies the data and model an archive was fitted to."""
    payload = {
        "spec": spec.to_dict(),
        "species": config.raw.get("species"),
        "grid": config.raw["grid"],
        "observations": file_digest(config.path("observations")),
        "controls": file_digest(config.path("controls")),
        "seed": config.seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# fit archive


def save_fit(path, result: FitResult, config_hash: str) -> None:
    arrays = {
        "grid_internal": result.grid_internal,
        "log_post": result.log_post,
        "weights": result.weights,
        "modes": np.array([a.mode for a in result.approxs]),
        "chols": np.array([a.chol for a in result.approxs]),
        "logdets": np.array([a.logdet for a in result.approxs]),
        "values": np.array([a.value for a in result.approxs]),
        "hyper_mode": result.hyper_mode,
        "hyper_cov": result.hyper_cov,
        "knots": result.knots,
        "years": result.years,
    }
    meta = {
        "spec": result.spec.to_dict(),
        "hyper_names": list(result.hyper_names),
        "column_names": result.column_names,
        "summary": [list(r) for r in result.summary],
        "seed": result.seed,
        "spec_hash": result.spec_hash,
        "config_hash": config_hash,
        "year_mid": result.year_mid,
        "sign_reversal": result.sign_reversal,
        "dic": None if result.dic is None else vars(result.dic),
    }
    buf = io.BytesIO()
    # fixed timestamps keep the archive byte-identical across runs
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.save(member, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue(), zipfile.ZIP_DEFLATED)
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0)), json.dumps(meta, sort_keys=True), zipfile.ZIP_DEFLATED)
    atomic_write_bytes(path, buf.getvalue())


def load_fit(path) -> tuple[FitResult, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: fit archive not found")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {
            n[:-4]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False) for n in zf.namelist() if n.endswith(".npy")
        }
    approxs = [
        GaussianApprox(m, L, float(ld), float(v), True, 0)
        for m, L, ld, v in zip(arrays["modes"], arrays["chols"], arrays["logdets"], arrays["values"])
    ]
    dic = meta.get("dic")
    result = FitResult(
        spec=ModelSpec.from_dict(meta["spec"]),
        hyper_names=tuple(meta["hyper_names"]),
        grid_internal=arrays["grid_internal"],
        log_post=arrays["log_post"],
        weights=arrays["weights"],
        approxs=approxs,
        hyper_mode=arrays["hyper_mode"],
        hyper_cov=arrays["hyper_cov"],
        column_names=meta["column_names"],
        summary=[tuple(r) for r in meta["summary"]],
        seed=meta["seed"],
        spec_hash=meta["spec_hash"],
        dic=None if dic is None else DICResult(**dic),
        knots=arrays["knots"],
        years=arrays["years"],
        year_mid=meta["year_mid"],
        sign_reversal=meta["sign_reversal"],
    )
    return result, meta["config_hash"]
