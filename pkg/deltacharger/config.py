"""
Global configuration

Defaults live on the models themselves; a JSON file may override any subset
and command-line flags override the file.
"""

import json
import logging
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from deltacharger.contact import CurrentModel, ElectrodePlan, SensorModel
from deltacharger.dockfsm import DockConfig, DockSimulator
from deltacharger.errors import IOFailure, UsageError
from deltacharger.kinematics import DeltaGeometry
from deltacharger.learn.training import TrainConfig

logger = logging.getLogger(__name__)


class PathsConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    output_dir: Path = Path("runs")
    n_jobs: int = 1


class GlobalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    geometry: DeltaGeometry = DeltaGeometry()
    plan: ElectrodePlan = ElectrodePlan()
    sensor: SensorModel = SensorModel()
    current: CurrentModel = CurrentModel()
    train: TrainConfig = TrainConfig()
    dock: DockConfig = DockConfig()
    paths: PathsConfig = PathsConfig()

    def echo(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def echo_dict(self) -> dict:
        return json.loads(json.dumps(self.model_dump(mode="json"), sort_keys=True))

    def simulator(self) -> DockSimulator:
        return DockSimulator(geometry=self.geometry, plan=self.plan, sensor=self.sensor, current=self.current,
                             dock=self.dock)

    def override(self, section: str, **values) -> "GlobalConfig":
        """Copy with non-None ``values`` applied to one section, revalidated"""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        data = self.model_dump()
        data[section].update(values)
        try:
            return GlobalConfig(**data)
        except ValidationError as e:
            raise UsageError(f"invalid {section} setting: {e.errors()[0]['msg']}")


def load_config(path: Optional[Path] = None) -> GlobalConfig:
    if path is None:
        return GlobalConfig()
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise IOFailure(f"cannot read config {path}: {e}")
    except ValueError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}")
    try:
        config = GlobalConfig(**data)
    except ValidationError as e:
        raise UsageError(f"config {path} rejected: {e}")
    logger.debug("loaded config from %s", path)
    return config
