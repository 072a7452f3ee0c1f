"""Configuration file handling: one YAML file, flat keys with dotted
sections, every default equal to the built-in pipeline values.

Recognized keys (all optional):

.. code-block:: yaml

    frontend:
      voxel_leaf: 0.25
      keyscan_translation: 1.0
      keyscan_rotation_deg: 30.0
      submap_window: 20
      loop_radius: 10.0
      min_separation: 10
      loop_fitness_max: 5.0
      scan_max_corr: 1.0
      loop_max_corr: 2.0
    icm:
      rot_threshold: 0.05
      trans_threshold: 0.1
    optimizer:
      max_iterations: 50
      relative_tolerance: 1.0e-6
    pipeline:
      use_loop_closures: true
      use_icm: true
      survey_prior_every: 0
      workers: 0
    basestation:
      icm: {rot_threshold: 0.005, trans_threshold: 0.05}
      interrobot_fitness_max: 0.18
      interrobot_radius: 10.0
      max_candidates_per_round: 40
      export_voxel: 0.1
      persist_every: 50
      comm: {drop_probability: 0.0, delay_messages: 0, seed: 0}
"""

from __future__ import annotations

import math
from dataclasses import fields
from pathlib import Path

import yaml

from lamp.frontend import FrontendConfig
from lamp.icm import IcmThresholds
from lamp.optimizer import OptimizerConfig
from lamp.pipeline import PipelineConfig


class ConfigError(ValueError):
    pass


def _apply(target, section: dict, special=()):
    names = {f.name for f in fields(target)}
    for key, value in section.items():
        if key in special:
            continue
        if key not in names:
            raise ConfigError(f"unknown option {key!r} for {type(target).__name__}")
        setattr(target, key, type(getattr(target, key))(value))


def load_pipeline_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """PipelineConfig from an optional YAML file plus flag overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
    config = PipelineConfig()
    fe_section = dict(data.get("frontend") or {})
    if "keyscan_rotation_deg" in fe_section:
        config.frontend.keyscan_rotation = math.radians(
            float(fe_section.pop("keyscan_rotation_deg"))
        )
    _apply(config.frontend, fe_section)
    icm_section = dict(data.get("icm") or {})
    if "rot_threshold" in icm_section:
        config.icm.rotation = float(icm_section.pop("rot_threshold"))
    if "trans_threshold" in icm_section:
        config.icm.translation = float(icm_section.pop("trans_threshold"))
    _apply(config.icm, icm_section)
    _apply(config.optimizer, dict(data.get("optimizer") or {}))
    _apply(config, dict(data.get("pipeline") or {}))
    for key, value in (overrides or {}).items():
        if not hasattr(config, key):
            raise ConfigError(f"unknown pipeline option {key!r}")
        setattr(config, key, value)
    return config


def load_station_config(path=None) -> "StationConfig":
    from lamp.basestation import CommConfig, StationConfig

    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    section = dict(data.get("basestation") or {})
    config = StationConfig()
    icm_section = dict(section.pop("icm", {}) or {})
    if "rot_threshold" in icm_section:
        config.icm.rotation = float(icm_section.pop("rot_threshold"))
    if "trans_threshold" in icm_section:
        config.icm.translation = float(icm_section.pop("trans_threshold"))
    comm_section = dict(section.pop("comm", {}) or {})
    _apply(config.comm, comm_section)
    _apply(config, section, special=("icm", "comm"))
    return config
