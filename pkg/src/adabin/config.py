# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Run configuration.

A configuration file is flat ``key=value`` text.  A file with no section header is read as
a single implicit ``[run]`` section; an explicit ``[run]`` header is also accepted.  Values
are resolved in order: built-in defaults, then the selected profile, then the file, then
any overrides passed on the command line.
"""

import configparser
import json
import os
from configparser import ConfigParser, SectionProxy
from typing import Any, Callable, Dict, Optional, Union

import cattrs
from attrs import field, frozen

from .interface import ActivationMode, AdaBinError, AlphaGradMode, ArchitectureId, DatasetKind, Nonlinearity, Profile, WeightMode
from .model import ARCHITECTURE_DEFAULTS, RESNET20_WIDTHS, SMALLCNN_BLOCKS, GammaPolicy, ModelConfig, parse_architecture
from .util import homedir
from .validator import between, enum, nonnegative, positive, string

# Configuration defaults
DEFAULT_CONFIG_PATH = os.path.join(homedir(), ".adabinrc")
DATA_DIR_ENV = "ADABIN_DATA"
CONFIG_SECTION = "run"
DEFAULT_ARCHITECTURE = ArchitectureId.RESNET20_ADABIN.value
DEFAULT_WIDTH = 1.0
DEFAULT_CLASSES = 10
DEFAULT_DATASET = DatasetKind.CIFAR10.value
DEFAULT_DATA_DIR = "data"
DEFAULT_SUBSET = 0  # 0 means the full training split
DEFAULT_TEST_SUBSET = 0
DEFAULT_SUBSET_SEED = 0
DEFAULT_EPOCHS = 400
DEFAULT_BATCH_SIZE = 256
DEFAULT_LR0 = 0.1
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_SEED = 0
DEFAULT_ALPHA_GRAD = AlphaGradMode.CONSISTENT.value
DEFAULT_LATENT_CLIP = 0.0  # 0 means no clipping
DEFAULT_OUT_DIR = "runs"
DEFAULT_LOGFILE_PATH = None
DEFAULT_PROFILE = Profile.PAPER.value

DEFAULTS: Dict[str, Any] = {
    "architecture": DEFAULT_ARCHITECTURE,
    "width": DEFAULT_WIDTH,
    "classes": DEFAULT_CLASSES,
    "dataset": DEFAULT_DATASET,
    "data_dir": DEFAULT_DATA_DIR,
    "subset": DEFAULT_SUBSET,
    "test_subset": DEFAULT_TEST_SUBSET,
    "subset_seed": DEFAULT_SUBSET_SEED,
    "epochs": DEFAULT_EPOCHS,
    "batch_size": DEFAULT_BATCH_SIZE,
    "lr0": DEFAULT_LR0,
    "momentum": DEFAULT_MOMENTUM,
    "weight_decay": DEFAULT_WEIGHT_DECAY,
    "seed": DEFAULT_SEED,
    "alpha_grad": DEFAULT_ALPHA_GRAD,
    "weight_mode": None,
    "activation_mode": None,
    "nonlinearity": None,
    "learn_gamma_plus": None,
    "learn_gamma_minus": None,
    "float_first": True,
    "float_last": True,
    "latent_clip": DEFAULT_LATENT_CLIP,
    "augment": True,
    "prefetch": True,
    "out_dir": DEFAULT_OUT_DIR,
    "logfile_path": DEFAULT_LOGFILE_PATH,
    "profile": DEFAULT_PROFILE,
}

# A profile only supplies defaults; file values and overrides still win
PROFILES: Dict[Profile, Dict[str, Any]] = {
    Profile.PAPER: {},
    Profile.DESK: {"epochs": 30, "subset": 10000},
}

TRAIN_SIZES = {DatasetKind.CIFAR10: 50000, DatasetKind.MNIST: 60000}
TEST_SIZES = {DatasetKind.CIFAR10: 10000, DatasetKind.MNIST: 10000}
DATASET_CLASSES = {DatasetKind.CIFAR10: 10, DatasetKind.MNIST: 10}
IMAGE_GEOMETRY = {DatasetKind.CIFAR10: (3, 32), DatasetKind.MNIST: (1, 28)}


def _optional_enum(options: Any) -> Callable[[Any], Any]:
    # "none" is a real Nonlinearity value, so only an empty string means unset for enums that define it
    unset = ("",) if any(member.value == "none" for member in options) else ("", "none")

    def convert(value: Any) -> Any:
        if value is None or (isinstance(value, str) and value.strip().lower() in unset):
            return None
        return options(value.strip() if isinstance(value, str) else value)

    return convert


def _optional_bool(value: Any) -> Optional[bool]:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
        return None
    return _bool(value)


def _bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text not in ConfigParser.BOOLEAN_STATES:
        raise ValueError("Not a boolean: %s" % value)
    return ConfigParser.BOOLEAN_STATES[text]


def _optional_str(value: Any) -> Optional[str]:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
        return None
    return str(value)


def _final_channels(architecture: ArchitectureId, width: float) -> int:
    resnet = architecture in (ArchitectureId.RESNET20_ADABIN, ArchitectureId.RESNET20_SIGN_PRELU)
    base = RESNET20_WIDTHS[-1] if resnet else SMALLCNN_BLOCKS[-1][0]
    return max(1, int(round(base * width)))


# pylint: disable=too-many-instance-attributes
@frozen
class RunConfig:
    """
    Run configuration.

    Quantizer and nonlinearity fields left as None take the architecture's defaults.  The gamma
    learnability fields may only restate what the nonlinearity implies; they exist so a config
    file can make the Maxout variant explicit.

    Attributes:
        architecture(ArchitectureId): Network topology and default quantizers
        width(float): Channel multiplier
        classes(int): Width of the logits
        dataset(DatasetKind): Dataset to train and evaluate on
        data_dir(str): Directory holding the dataset files
        subset(int): Stratified training subset size, 0 for the full split
        test_subset(int): Stratified test subset size, 0 for the full split
        subset_seed(int): Seed for subset selection, independent of the training seed
        epochs(int): Number of epochs in the cosine schedule
        batch_size(int): Training batch size
        lr0(float): Initial learning rate
        momentum(float): SGD momentum
        weight_decay(float): Weight decay applied to convolution and linear weights only
        seed(int): Seed for initialization, shuffling and augmentation
        alpha_grad(AlphaGradMode): Activation distance gradient rule
        weight_mode(WeightMode): Weight quantizer override
        activation_mode(ActivationMode): Activation quantizer override
        nonlinearity(Nonlinearity): Nonlinearity override
        learn_gamma_plus(bool): Explicit learnability of the positive Maxout slope
        learn_gamma_minus(bool): Explicit learnability of the negative Maxout slope
        float_first(bool): Keep the stem convolution real-valued
        float_last(bool): Keep the classifier real-valued
        latent_clip(float): Clip latent weights to [-c, c] after each step, 0 to disable
        augment(bool): Apply random crop and flip to CIFAR-10 training batches
        prefetch(bool): Prepare the next training batch in a background thread
        out_dir(str): Directory under which run directories are created
        logfile_path(str): The path to the log file on disk
        profile(Profile): The profile that supplied the defaults
    """

    architecture: ArchitectureId = field(converter=parse_architecture, default=ArchitectureId(DEFAULT_ARCHITECTURE))
    width: float = field(default=DEFAULT_WIDTH, validator=positive)
    classes: int = field(default=DEFAULT_CLASSES, validator=positive)
    dataset: DatasetKind = field(default=DatasetKind(DEFAULT_DATASET), validator=enum(DatasetKind))
    data_dir: str = field(default=DEFAULT_DATA_DIR, validator=string)
    subset: int = field(default=DEFAULT_SUBSET, validator=nonnegative)
    test_subset: int = field(default=DEFAULT_TEST_SUBSET, validator=nonnegative)
    subset_seed: int = field(default=DEFAULT_SUBSET_SEED, validator=nonnegative)
    epochs: int = field(default=DEFAULT_EPOCHS, validator=positive)
    batch_size: int = field(default=DEFAULT_BATCH_SIZE, validator=positive)
    lr0: float = field(default=DEFAULT_LR0, validator=nonnegative)
    momentum: float = field(default=DEFAULT_MOMENTUM, validator=between(0.0, 1.0))
    weight_decay: float = field(default=DEFAULT_WEIGHT_DECAY, validator=nonnegative)
    seed: int = field(default=DEFAULT_SEED, validator=nonnegative)
    alpha_grad: AlphaGradMode = field(default=AlphaGradMode(DEFAULT_ALPHA_GRAD), validator=enum(AlphaGradMode))
    weight_mode: Optional[WeightMode] = None
    activation_mode: Optional[ActivationMode] = None
    nonlinearity: Optional[Nonlinearity] = None
    learn_gamma_plus: Optional[bool] = None
    learn_gamma_minus: Optional[bool] = None
    float_first: bool = True
    float_last: bool = True
    latent_clip: float = field(default=DEFAULT_LATENT_CLIP, validator=nonnegative)
    augment: bool = True
    prefetch: bool = True
    out_dir: str = field(default=DEFAULT_OUT_DIR, validator=string)
    logfile_path: Optional[str] = DEFAULT_LOGFILE_PATH
    profile: Profile = field(default=Profile(DEFAULT_PROFILE), validator=enum(Profile))

    def __attrs_post_init__(self) -> None:
        _check_contradictions(self)

    def to_json(self) -> str:
        """Serialize to JSON."""
        return json.dumps(cattrs.unstructure(self), indent="  ")

    @staticmethod
    def from_json(data: str) -> "RunConfig":
        """Deserialize from JSON."""
        return cattrs.structure(json.loads(data), RunConfig)

    @property
    def effective_nonlinearity(self) -> Nonlinearity:
        return self.nonlinearity or ARCHITECTURE_DEFAULTS[self.architecture][2]

    def model_config(self) -> ModelConfig:
        """The architecture description for this run, with image geometry taken from the dataset."""
        in_channels, image_size = IMAGE_GEOMETRY[self.dataset]
        return ModelConfig(
            architecture=self.architecture,
            width=self.width,
            classes=self.classes,
            in_channels=in_channels,
            image_size=image_size,
            weight_mode=self.weight_mode,
            activation_mode=self.activation_mode,
            nonlinearity=self.nonlinearity,
            alpha_grad=self.alpha_grad,
            float_first=self.float_first,
            float_last=self.float_last,
        )


def _check_contradictions(c: RunConfig) -> None:
    """Reject combinations of settings that cannot describe a single run."""
    if c.architecture in (ArchitectureId.RESNET20_SIGN_PRELU, ArchitectureId.SMALLCNN_SIGN_PRELU):
        explicit = (c.weight_mode, c.activation_mode, c.nonlinearity)
        names = ("weight_mode", "activation_mode", "nonlinearity")
        for key, value, expected in zip(names, explicit, ARCHITECTURE_DEFAULTS[c.architecture]):
            if value is not None and value != expected:
                architecture = c.architecture.value
                raise ValueError("'%s' is %s but architecture %s requires %s" % (key, value.value, architecture, expected.value))
    nonlinearity = c.effective_nonlinearity
    policy = GammaPolicy.for_nonlinearity(nonlinearity)
    for key, value, implied in (
        ("learn_gamma_plus", c.learn_gamma_plus, policy.learn_plus),
        ("learn_gamma_minus", c.learn_gamma_minus, policy.learn_minus),
    ):
        if value is not None and value != implied:
            raise ValueError("'%s' is %s but nonlinearity %s implies %s" % (key, value, nonlinearity.value, implied))
    train_size, test_size = TRAIN_SIZES[c.dataset], TEST_SIZES[c.dataset]
    if c.subset > train_size:
        raise ValueError("'subset' is %d but %s has %d training examples" % (c.subset, c.dataset.value, train_size))
    if c.test_subset > test_size:
        raise ValueError("'test_subset' is %d but %s has %d test examples" % (c.test_subset, c.dataset.value, test_size))
    if c.classes != DATASET_CLASSES[c.dataset]:
        raise ValueError("'classes' is %d but %s has %d classes" % (c.classes, c.dataset.value, DATASET_CLASSES[c.dataset]))
    if not c.float_last and _final_channels(c.architecture, c.width) < c.classes:
        raise ValueError(
            "'float_last' is false but %d final channels cannot feed a binary classifier of width %d"
            % (_final_channels(c.architecture, c.width), c.classes)
        )


_CONFIG: Optional[RunConfig] = None

_CONVERTERS: Dict[str, Callable[[Any], Any]] = {
    "architecture": parse_architecture,
    "width": float,
    "classes": int,
    "dataset": DatasetKind,
    "data_dir": str,
    "subset": int,
    "test_subset": int,
    "subset_seed": int,
    "epochs": int,
    "batch_size": int,
    "lr0": float,
    "momentum": float,
    "weight_decay": float,
    "seed": int,
    "alpha_grad": AlphaGradMode,
    "weight_mode": _optional_enum(WeightMode),
    "activation_mode": _optional_enum(ActivationMode),
    "nonlinearity": _optional_enum(Nonlinearity),
    "learn_gamma_plus": _optional_bool,
    "learn_gamma_minus": _optional_bool,
    "float_first": _bool,
    "float_last": _bool,
    "latent_clip": float,
    "augment": _bool,
    "prefetch": _bool,
    "out_dir": str,
    "logfile_path": _optional_str,
    "profile": Profile,
}


def _get(
    parser: Union[Optional[ConfigParser], SectionProxy], key: str, overrides: Optional[Dict[str, Any]], defaults: Dict[str, Any]
) -> Any:
    """Get a value from a parser, overriding or setting a default as necessary."""
    override = overrides[key] if overrides and key in overrides else None
    default = defaults[key] if defaults and key in defaults else None
    return override if override is not None else parser.get(key, default) if parser else default


def _defaults(parser: Union[Optional[ConfigParser], SectionProxy], overrides: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """Built-in defaults with the environment and the selected profile applied."""
    defaults = dict(DEFAULTS)
    defaults["data_dir"] = os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR)
    profile = Profile(_get(parser, "profile", overrides, defaults))
    defaults.update(PROFILES[profile])
    return defaults


def _check_keys(source: str, keys: Any) -> None:
    unknown = sorted(set(keys) - set(DEFAULTS))
    if unknown:
        raise ValueError("Unknown configuration key(s) in %s: %s" % (source, ", ".join(unknown)))


def _parse(
    parser: Union[Optional[ConfigParser], SectionProxy], overrides: Optional[Dict[str, Any]], defaults: Dict[str, Any]
) -> RunConfig:
    """Create a RunConfig based on configuration, applying defaults to values that are not available."""
    if overrides:
        _check_keys("overrides", overrides.keys())
    values: Dict[str, Any] = {}
    for key, converter in _CONVERTERS.items():
        raw = _get(parser, key, overrides, defaults)
        try:
            values[key] = converter(raw) if raw is not None else None
        except (TypeError, ValueError, AdaBinError) as e:
            raise ValueError("Invalid value for '%s': %s" % (key, raw)) from e
    return RunConfig(**values)


def _read(config_path: str) -> SectionProxy:
    """Read a flat or single-section config file."""
    with open(config_path, "r", encoding="utf-8") as handle:
        text = handle.read()
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = "[%s]\n%s" % (CONFIG_SECTION, text)
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text, source=config_path)
    extra = [section for section in parser.sections() if section != CONFIG_SECTION]
    if extra:
        raise ValueError("Unexpected section(s) in %s: %s" % (config_path, ", ".join(extra)))
    if not parser.has_section(CONFIG_SECTION):
        parser.add_section(CONFIG_SECTION)
    section = parser[CONFIG_SECTION]
    _check_keys(config_path, section.keys())
    return section


def _load(config_path: str, overrides: Optional[Dict[str, Any]]) -> RunConfig:
    """Load configuration from disk, applying defaults for any value that is not found."""
    if not os.path.exists(config_path):
        return _parse(None, overrides, _defaults(None, overrides))
    else:
        section = _read(config_path)
        return _parse(section, overrides, _defaults(section, overrides))


def load_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> None:
    """Load global configuration for later use, applying defaults for any value that is not found."""
    global _CONFIG  # pylint: disable=global-statement
    if config_path:
        # if they override the config path, the file must exist
        if not os.path.exists(config_path):
            raise ValueError("Config path does not exist: %s" % config_path)
        _CONFIG = _load(config_path, overrides)
    else:
        # however, it's ok if the default config doesn't exist
        _CONFIG = _load(DEFAULT_CONFIG_PATH, overrides)


def config() -> RunConfig:
    """Return run configuration."""
    if not _CONFIG:
        raise ValueError("Configuration has not yet been loaded.")
    return _CONFIG
