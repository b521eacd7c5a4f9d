"""Panel-data container, CSV ingestion and design-matrix preparation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from mixquant.core.errors import ConfigError, DataValidationError
from mixquant.core.models import MixtureParams

logger = logging.getLogger(__name__)

UNIT_COLUMN = "unit_id"
TIME_COLUMN = "time"
OUTCOME_COLUMN = "y"


# =============================================================================
# Raw panel
# =============================================================================


@dataclass(frozen=True, slots=True)
class Observation:
    """One (unit, time) record."""

    time: int
    y: float
    s: tuple[float, ...] = ()
    x: tuple[float, ...] = ()


@dataclass(frozen=True)
class UnitRecord:
    """All observations of one unit, time indices strictly increasing."""

    unit_id: str
    observations: list[Observation]

    def __post_init__(self) -> None:
        if not self.observations:
            raise DataValidationError(f"unit {self.unit_id!r} has no observations")
        times = [obs.time for obs in self.observations]
        if any(b <= a for a, b in zip(times, times[1:], strict=False)):
            raise DataValidationError(f"time indices of unit {self.unit_id!r} are not strictly increasing")


@dataclass(frozen=True)
class PanelDataset:
    """Longitudinal semi-continuous records with two covariate blocks.

    Attributes:
        units: Unit records in file order.
        covariate_names_binary: Names of the s-block (logit part).
        covariate_names_positive: Names of the x-block (quantile part).
    """

    units: list[UnitRecord]
    covariate_names_binary: list[str] = field(default_factory=list)
    covariate_names_positive: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        m, p = len(self.covariate_names_binary), len(self.covariate_names_positive)
        ids = [unit.unit_id for unit in self.units]
        if len(set(ids)) != len(ids):
            raise DataValidationError("duplicate unit identifiers")
        for unit in self.units:
            for obs in unit.observations:
                if len(obs.s) != m or len(obs.x) != p:
                    raise DataValidationError(
                        "covariate vector has the wrong dimension",
                        [(unit.unit_id, obs.time)],
                    )

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_observations(self) -> int:
        return sum(len(unit.observations) for unit in self.units)

    def outcomes(self) -> np.ndarray:
        return np.array([obs.y for unit in self.units for obs in unit.observations], dtype=float)

    def covariate_columns(self) -> list[str]:
        """Union of both blocks, binary block first, each name once."""
        return list(dict.fromkeys([*self.covariate_names_binary, *self.covariate_names_positive]))

    def to_frame(self) -> pd.DataFrame:
        """Long frame in the ingestion schema: unit_id, time, y, covariates."""
        columns = self.covariate_columns()
        records = []
        for unit in self.units:
            for obs in unit.observations:
                values = dict(zip(self.covariate_names_positive, obs.x, strict=True))
                values.update(zip(self.covariate_names_binary, obs.s, strict=True))
                records.append([unit.unit_id, obs.time, obs.y, *(values[c] for c in columns)])
        return pd.DataFrame(records, columns=[UNIT_COLUMN, TIME_COLUMN, OUTCOME_COLUMN, *columns])

    def with_outcomes(self, y: np.ndarray) -> PanelDataset:
        """Copy with outcomes replaced in record order; covariates are kept."""
        if y.shape != (self.n_observations,):
            raise ValueError("outcome vector does not match the number of observations")
        values = iter(y.tolist())
        units = [
            UnitRecord(unit.unit_id, [replace(obs, y=next(values)) for obs in unit.observations])
            for unit in self.units
        ]
        return replace(self, units=units)

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        binary: list[str],
        positive: list[str],
        unit_col: str = UNIT_COLUMN,
        time_col: str = TIME_COLUMN,
        y_col: str = OUTCOME_COLUMN,
    ) -> PanelDataset:
        """Build a dataset from a long frame, sorting each unit by time.

        Raises:
            ConfigError: A referenced column is missing.
            DataValidationError: Values cannot be interpreted.
        """
        missing = [c for c in [unit_col, time_col, y_col, *binary, *positive] if c not in frame.columns]
        if missing:
            raise ConfigError(f"columns not found in data: {', '.join(missing)}")
        try:
            times = frame[time_col].astype(int).to_numpy()
            y = pd.to_numeric(frame[y_col]).to_numpy(dtype=float)
            s = frame[binary].apply(pd.to_numeric).to_numpy(dtype=float) if binary else np.zeros((len(frame), 0))
            x = frame[positive].apply(pd.to_numeric).to_numpy(dtype=float) if positive else np.zeros((len(frame), 0))
        except (TypeError, ValueError) as e:
            raise DataValidationError(f"non-numeric values in panel data: {e}") from e

        unit_ids = frame[unit_col].astype(str).to_numpy()
        order = pd.DataFrame({"u": unit_ids, "t": times}).reset_index().sort_values(["t"], kind="stable")
        units: list[UnitRecord] = []
        for uid, rows in order.groupby("u", sort=False)["index"]:
            idx = rows.to_numpy()
            observations = [
                Observation(time=int(times[r]), y=float(y[r]), s=tuple(s[r].tolist()), x=tuple(x[r].tolist()))
                for r in idx
            ]
            units.append(UnitRecord(str(uid), observations))
        # groupby over the time-sorted frame yields units in first-time order; restore file order
        first_seen = {uid: i for i, uid in reversed(list(enumerate(unit_ids)))}
        units.sort(key=lambda unit: first_seen[unit.unit_id])
        return cls(units=units, covariate_names_binary=list(binary), covariate_names_positive=list(positive))


def read_panel_csv(
    path: Path,
    binary: list[str],
    positive: list[str],
    unit_col: str = UNIT_COLUMN,
    time_col: str = TIME_COLUMN,
    y_col: str = OUTCOME_COLUMN,
) -> PanelDataset:
    """Read a UTF-8, comma-separated panel file with a header row.

    Raises:
        OSError: The file cannot be read.
        ConfigError: A referenced column is missing.
        DataValidationError: The file cannot be parsed.
    """
    try:
        frame = pd.read_csv(path, encoding="utf-8", dtype={unit_col: str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataValidationError(f"cannot parse {path}: {e}") from e
    dataset = PanelDataset.from_frame(frame, binary, positive, unit_col=unit_col, time_col=time_col, y_col=y_col)
    logger.info("Read %d units / %d observations from %s", dataset.n_units, dataset.n_observations, path)
    return dataset


def write_panel_csv(data: PanelDataset, path: Path) -> None:
    """Write a dataset in the ingestion schema."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data.to_frame().to_csv(path, index=False, encoding="utf-8")


def zero_fraction(data: PanelDataset) -> float:
    """Share of observations with y = 0."""
    y = data.outcomes()
    return float(np.mean(y == 0.0))


# =============================================================================
# Prepared design
# =============================================================================


@dataclass(frozen=True)
class Standardization:
    """Column means and scales used to standardize the two covariate blocks."""

    s_mean: np.ndarray
    s_scale: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray

    def to_raw(self, params: MixtureParams) -> MixtureParams:
        """Express standardized-scale parameters on the raw covariate scale."""
        gamma = params.gamma / self.s_scale
        beta = params.beta / self.x_scale
        return replace(
            params,
            gamma=gamma,
            beta=beta,
            b0=params.b0 - float(gamma @ self.s_mean),
            b1=params.b1 - float(beta @ self.x_mean),
        )

    def to_standard(self, params: MixtureParams) -> MixtureParams:
        """Inverse of ``to_raw``."""
        return replace(
            params,
            gamma=params.gamma * self.s_scale,
            beta=params.beta * self.x_scale,
            b0=params.b0 + float(params.gamma @ self.s_mean),
            b1=params.b1 + float(params.beta @ self.x_mean),
        )


@dataclass(frozen=True, eq=False)
class PreparedData:
    """Stacked design ready for fitting.

    Attributes:
        d: Zero indicator per observation (True where y = 0).
        y_log: log(y) where d is False, NaN elsewhere.
        S: Binary-block design (n_obs x m), standardized when ``standardization`` is set.
        X: Positive-block design (n_obs x p).
        unit_index: Position of each observation's unit in ``unit_ids``.
        unit_ids: Unit identifiers in dataset order.
        times: Time index per observation.
    """

    d: np.ndarray
    y_log: np.ndarray
    S: np.ndarray
    X: np.ndarray
    unit_index: np.ndarray
    unit_ids: list[str]
    times: np.ndarray
    binary_names: list[str] = field(default_factory=list)
    positive_names: list[str] = field(default_factory=list)
    standardization: Standardization | None = None

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_obs(self) -> int:
        return int(self.d.shape[0])

    @cached_property
    def pos_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.d)

    @cached_property
    def y_pos(self) -> np.ndarray:
        return self.y_log[self.pos_rows]

    @cached_property
    def X_pos(self) -> np.ndarray:
        return self.X[self.pos_rows]

    @cached_property
    def pos_unit(self) -> np.ndarray:
        return self.unit_index[self.pos_rows]

    def subset(self, units: np.ndarray) -> PreparedData:
        """Restrict to the given unit positions, keeping the standardization."""
        units = np.sort(np.asarray(units, dtype=int))
        remap = np.full(self.n_units, -1)
        remap[units] = np.arange(units.size)
        rows = np.flatnonzero(np.isin(self.unit_index, units))
        return PreparedData(
            d=self.d[rows],
            y_log=self.y_log[rows],
            S=self.S[rows],
            X=self.X[rows],
            unit_index=remap[self.unit_index[rows]],
            unit_ids=[self.unit_ids[u] for u in units],
            times=self.times[rows],
            binary_names=self.binary_names,
            positive_names=self.positive_names,
            standardization=self.standardization,
        )


def raw_design(data: PanelDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unstandardized binary block, positive block and unit position per observation, in record order."""
    observations = [(i, obs) for i, unit in enumerate(data.units) for obs in unit.observations]
    m, p = len(data.covariate_names_binary), len(data.covariate_names_positive)
    S = np.array([obs.s for _, obs in observations], dtype=float).reshape(len(observations), m)
    X = np.array([obs.x for _, obs in observations], dtype=float).reshape(len(observations), p)
    return S, X, np.array([i for i, _ in observations], dtype=int)


def _standardize(block: np.ndarray, names: list[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = block.mean(axis=0) if block.shape[0] else np.zeros(block.shape[1])
    scale = block.std(axis=0) if block.shape[0] else np.ones(block.shape[1])
    constant = scale <= 1e-12
    for name in np.asarray(names)[constant]:
        logger.warning("Covariate %r is constant; it is centered but not scaled", name)
    scale = np.where(constant, 1.0, scale)
    return (block - mean) / scale, mean, scale


def prepare(data: PanelDataset, standardize: bool = True, zero_threshold: float = 0.0) -> PreparedData:
    """Split zeros from positives, log-transform positives and stack the designs.

    Args:
        data: Panel dataset.
        standardize: Center and scale each covariate column.
        zero_threshold: Outcomes with |y| < threshold count as zero (0 means exact zeros only).

    Raises:
        DataValidationError: Empty data, negative or NaN outcomes, NaN covariates.
    """
    if data.n_units == 0 or data.n_observations == 0:
        raise DataValidationError("dataset is empty")

    unit_ids = [unit.unit_id for unit in data.units]
    records = [(i, unit.unit_id, obs) for i, unit in enumerate(data.units) for obs in unit.observations]
    y = data.outcomes()
    S, X, unit_index = raw_design(data)

    d = (y == 0.0) | (np.abs(y) < zero_threshold)
    bad = np.isnan(y) | ((y < 0.0) & ~d)
    if bad.any():
        where = [(records[r][1], records[r][2].time) for r in np.flatnonzero(bad)]
        raise DataValidationError("negative or missing outcomes", where)
    bad_cov = np.isnan(S).any(axis=1) | np.isnan(X).any(axis=1)
    if bad_cov.any():
        where = [(records[r][1], records[r][2].time) for r in np.flatnonzero(bad_cov)]
        raise DataValidationError("NaN covariate values", where)

    y_log = np.full(y.shape, np.nan)
    y_log[~d] = np.log(y[~d])
    if not np.all(np.isfinite(y_log[~d])):
        raise DataValidationError("log of positive outcomes is not finite")

    standardization = None
    if standardize:
        S, s_mean, s_scale = _standardize(S, data.covariate_names_binary)
        X, x_mean, x_scale = _standardize(X, data.covariate_names_positive)
        standardization = Standardization(s_mean=s_mean, s_scale=s_scale, x_mean=x_mean, x_scale=x_scale)

    return PreparedData(
        d=d,
        y_log=y_log,
        S=S,
        X=X,
        unit_index=unit_index,
        unit_ids=unit_ids,
        times=np.array([obs.time for _, _, obs in records], dtype=int),
        binary_names=list(data.covariate_names_binary),
        positive_names=list(data.covariate_names_positive),
        standardization=standardization,
    )
