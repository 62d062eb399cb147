# flake8: noqa: F401
from ._version import version as __version__
from .archive import LeakArchive
from .bitprofile import BitProfile, WeightSetClass
from .config import CONFIG_KEYS, ExperimentConfig, validate_config
from .dram import DramGeometry, TemplateMap, generate_template, hammer
from .experiment import Experiment, run_experiment
from .leak import LeakLedger, RecoveryCurve, Strategy, run_attack
from .victim import QuantizedLayer, VictimModel
