"""Dataset manifests, run configuration and the command-line interface."""

from .config import RunConfig, load_run_config, save_run_config
from .manifest import (
    DVS_CLASS_NAMES,
    DatasetManifest,
    ManifestSample,
    SynthCorpusSpec,
    build_dvs_manifest,
    build_synth_manifest,
)

__all__ = [
    "RunConfig",
    "load_run_config",
    "save_run_config",
    "DVS_CLASS_NAMES",
    "DatasetManifest",
    "ManifestSample",
    "SynthCorpusSpec",
    "build_dvs_manifest",
    "build_synth_manifest",
]
