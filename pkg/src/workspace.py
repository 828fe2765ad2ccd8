"""Reading inputs and writing results of a run directory."""

import logging
import re
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml

from constants import (
    CSV_FLOAT_FORMAT,
    DRAWS_FILE,
    LATENT_FILE,
    METADATA_FILE,
    PREDICTIONS_FILE,
)
from errors import GeometryError, WorkspaceError
from geometry import LocationSet
from inference import PosteriorDraws, RegressionData
from predict import predictions_frame

logger = logging.getLogger(__name__)

_COORD = re.compile(r"^x(\d+)$")
_COVARIATE = re.compile(r"^cov_(\d+)$")


def _numbered(columns, pattern: re.Pattern) -> list[str]:
    found = sorted((int(m.group(1)), c) for c in columns if (m := pattern.match(str(c))))
    return [c for _, c in found]


class RunWorkspace:
    """CSV and YAML files under one output directory."""

    def __init__(self, out_dir: Path | str):
        self.out_dir = Path(out_dir)

    def path(self, name: str) -> Path:
        """Location of `name` inside the workspace."""
        return self.out_dir / name

    def read_frame(self, path: Path | str) -> pd.DataFrame:
        """Read a CSV with a header row."""
        path = Path(path)
        if not path.is_file():
            raise WorkspaceError("input file not found", path=str(path))
        try:
            return pd.read_csv(path, encoding="utf-8")
        except pd.errors.EmptyDataError:
            raise WorkspaceError("input file has no header", path=str(path)) from None
        except (pd.errors.ParserError, UnicodeDecodeError) as err:
            raise WorkspaceError(
                "input file is not valid CSV", path=str(path), cause=str(err)
            ) from None

    def write_frame(self, frame: pd.DataFrame, name: str) -> Path:
        """Write `frame` with full float precision."""
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, encoding="utf-8")
        logger.debug(f"wrote {len(frame)} rows to {path}")
        return path

    def write_metadata(self, content: dict[str, Any], name: str = METADATA_FILE) -> Path:
        """Merge `content` into the run metadata file."""
        path = self.path(name)
        current = self.read_metadata(name) if path.is_file() else {}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump({**current, **content}, sort_keys=True))
        return path

    def read_metadata(self, name: str = METADATA_FILE) -> dict[str, Any]:
        """Run metadata, empty when absent."""
        path = self.path(name)
        if not path.is_file():
            return {}
        content = yaml.safe_load(path.read_text()) or {}
        if not isinstance(content, dict):
            raise WorkspaceError("metadata file must hold a mapping", path=str(path))
        return content

    def load_training(self, path: Path | str) -> RegressionData:
        """Training table `x1..xd, y [, cov_1..cov_p]`."""
        frame = self.read_frame(path)
        coords = _numbered(frame.columns, _COORD)
        if not coords or "y" not in frame.columns:
            raise WorkspaceError("training file needs x1..xd and y columns", path=str(path))
        covariates = _numbered(frame.columns, _COVARIATE)
        try:
            locations = LocationSet(frame[coords].to_numpy(float))
        except GeometryError as err:
            raise WorkspaceError(f"bad training locations: {err.message}", path=str(path)) from err
        return RegressionData(
            locations=locations,
            Y=frame["y"].to_numpy(float),
            X=frame[covariates].to_numpy(float) if covariates else np.empty((len(frame), 0)),
        )

    def load_test(self, path: Path | str, dim: int, p: int) -> tuple[LocationSet, np.ndarray]:
        """Test table `x1..xd [, cov_1..cov_p]`; returns locations and covariates."""
        frame = self.read_frame(path)
        coords = _numbered(frame.columns, _COORD)
        if len(coords) != dim:
            raise WorkspaceError(
                "test file dimension differs from training", path=str(path), dim=dim
            )
        covariates = _numbered(frame.columns, _COVARIATE)
        if p and len(covariates) != p:
            raise WorkspaceError("test file lacks the training covariates", path=str(path), p=p)
        points = frame[coords].to_numpy(float).reshape(len(frame), dim)
        X = frame[covariates].to_numpy(float) if p else np.empty((len(frame), 0))
        return (LocationSet(points, dim=dim) if len(frame) else LocationSet.empty(dim)), X

    def write_draws(self, draws: PosteriorDraws, extra: dict[str, Any] | None = None) -> None:
        """Parameter draws, retained latent fields and run metadata."""
        self.write_frame(draws.frame, DRAWS_FILE)
        if draws.latent is not None:
            iterations = draws.retained()["iteration"].to_numpy()
            self.write_frame(predictions_frame(iterations, draws.latent), LATENT_FILE)
        self.write_metadata({**draws.metadata(), **(extra or {})})

    def read_draws(self) -> PosteriorDraws:
        """Draws written by `write_draws`."""
        meta = self.read_metadata()
        if "model" not in meta or "family" not in meta:
            raise WorkspaceError(
                "metadata lacks the fitted model", path=str(self.path(METADATA_FILE))
            )
        frame = self.read_frame(self.path(DRAWS_FILE))
        frame["retained"] = frame["retained"].astype(bool)
        latent = None
        if self.path(LATENT_FILE).is_file():
            _, latent = wide_array(self.read_frame(self.path(LATENT_FILE)))
        return PosteriorDraws(
            model=meta["model"],
            family=meta["family"],
            frame=frame,
            l1=int(meta.get("l1", len(frame))),
            l2=int(meta.get("l2", 1)),
            latent=latent,
            acceptance_rate=float(meta.get("acceptance_rate", float("nan"))),
            post_burn_acceptance_rate=float(meta.get("post_burn_acceptance_rate", float("nan"))),
            seed=int(meta.get("seed", 0)),
        )

    def write_predictions(self, iterations: np.ndarray, values: np.ndarray) -> Path:
        """Joint draws in long format."""
        return self.write_frame(predictions_frame(iterations, values), PREDICTIONS_FILE)

    def read_predictions(self) -> tuple[np.ndarray, np.ndarray]:
        """Iterations and (draws x locations) values from the predictions file."""
        return wide_array(self.read_frame(self.path(PREDICTIONS_FILE)))


def wide_array(frame: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    """Iterations and the (draws x locations) array of a long-format frame, in file order."""
    if frame.empty:
        return np.empty(0, dtype=int), np.empty((0, 0))
    m = int(frame["location_index"].max()) + 1
    if len(frame) % m or not np.array_equal(
        frame["location_index"].to_numpy().reshape(-1, m),
        np.tile(np.arange(m), (len(frame) // m, 1)),
    ):
        raise WorkspaceError("draw file rows are not grouped by iteration")
    return frame["iteration"].to_numpy(int)[::m], frame["value"].to_numpy(float).reshape(-1, m)
