"""Input class and helpers to parse the configuration

Configurations are flat UTF-8 files with one `key = value` option per line
and `#` comments. They are read with the configparser into an implicit
section, so the simple items (str, float, int, bool) are converted by the
configparser. Comma separated lists of values are supported in addition.

Options can be overridden from the command line, the overrides are given as
strings and parsed with the same rules as the file contents.
"""

import configparser
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Optional,
    Union,
    Type,
)


BuiltinType = Union[str, float, int, bool]
OptionType = Union[BuiltinType, List[BuiltinType], None]

SECTION = "matnet"  # name of the implicit section


class OptionError(Exception):
    """Custom error message if option missing, unknown or could not be parsed"""

    def __init__(self, message, key, section=SECTION):
        super().__init__(f"Option '{key}': {message}")
        self.key = key
        self.section = section


class SectionError(Exception):
    """Error if the configuration contains section headers"""

    def __init__(self, section):
        super().__init__(f"Section '[{section}]' found, but the configuration must be flat 'key = value' text")


class Condition:
    """Combine a string description with the evaluating function of a condition"""

    def __init__(self, function: Callable, desc: str):
        self.function = function
        self.desc = desc


def one_of(choices: Iterable[str]) -> Condition:
    """Condition that the value is one of the given choices"""
    allowed = list(choices)
    return Condition(lambda x: x in allowed, f"must be one of {allowed}")


class InputOption:
    """Declaration of one configuration key

    :param key: keyword in config
    :param keytype: expected type (one of OptionType)
    :param compulsory: if the key is required
    :param condition: optional Condition the value must satisfy
    :param default: optional default value
    """

    def __init__(
        self,
        key: str,
        keytype: Union[Type[BuiltinType], List[Type[BuiltinType]]],
        compulsory: bool = False,
        condition: Optional[Condition] = None,
        default: OptionType = None,
    ) -> None:
        self.key = key
        self.keytype = keytype
        self.compulsory = compulsory
        self.condition = condition
        self.default = default

    def parse(self, section: configparser.SectionProxy) -> Optional[OptionType]:
        """Read and convert the value of the option

        :return value: the converted value, the default if the key is missing
        :raises OptionError: for missing compulsory keys, failed conversions or conditions
        """
        val = self.default
        if self.key not in section.keys():
            if self.compulsory:
                raise OptionError("option not found, but it is required", self.key)
            return val
        try:
            if self.keytype == str:
                val = section.get(self.key)
            elif self.keytype == float:
                val = section.getfloat(self.key)
            elif self.keytype == int:
                val = section.getint(self.key)
            elif self.keytype == bool:
                val = section.getboolean(self.key)
            elif isinstance(self.keytype, list):
                # lists are comma separated
                val = [self.keytype[0](x.strip()) for x in section.get(self.key).split(",")]
        except ValueError as e:
            raise OptionError(f"could not be converted to {self.type_name()}", self.key) from e
        if self.condition and not self.condition.function(val):
            raise OptionError(self.condition.desc, self.key)
        return val

    def type_name(self) -> str:
        if isinstance(self.keytype, list):
            return f"list of {self.keytype[0].__name__}"
        return self.keytype.__name__


class Input:
    """Class that parses the configuration

    The options are grouped by their consumer (model, training, data) and
    stored in one dictionary per group. Missing optional keys are None in
    these dictionaries, the consumers then use their defaults.

    :param filename: configuration file, optional if text is given
    :param text: configuration text
    :param overrides: key -> value strings that replace file values
    """

    # define some conditions here
    positive = Condition(lambda x: x > 0, "must be greater than zero")
    all_positive = Condition(lambda lst: all(x > 0 for x in lst), "all values must be greater than zero")
    all_positive_or_zero = Condition(
        lambda lst: all(x >= 0 for x in lst), "all values must be greater or equal than zero"
    )
    positive_or_zero = Condition(lambda x: x >= 0, "must be greater or equal than zero")
    fraction = Condition(lambda x: 0 <= x < 1, "must be within [0, 1)")
    open_fraction = Condition(lambda x: 0 < x < 1, "must be within (0, 1)")

    def __init__(
        self,
        filename: Optional[str] = None,
        text: Optional[str] = None,
        overrides: Optional[Dict[str, str]] = None,
    ) -> None:
        self.filename = filename
        self.text = text
        self.overrides = overrides or {}
        self.model: Dict[str, OptionType] = {}
        self.train: Dict[str, OptionType] = {}
        self.data: Dict[str, OptionType] = {}

        self.parse_all()

    def parse_all(self) -> None:
        """Read the configuration, apply overrides and parse all option groups

        :raises FileNotFoundError: if the file does not exist
        :raises SectionError: if the text contains section headers
        :raises OptionError: for unknown, missing or invalid options
        """
        text = self.text or ""
        if self.filename:
            with open(self.filename, encoding="utf-8") as f:
                text = f.read()
        infile = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",))
        try:
            infile.read_string(f"[{SECTION}]\n{text}", source=self.filename or "<config>")
        except configparser.DuplicateSectionError as e:
            raise SectionError(e.section) from e
        except configparser.DuplicateOptionError as e:
            raise OptionError("given more than once", e.option) from e
        except configparser.Error as e:
            raise OptionError(f"could not be parsed ({e.message.splitlines()[0]})", "?") from e
        for sec in infile.sections():
            if sec != SECTION:
                raise SectionError(sec)
        section = infile[SECTION]
        for key, value in self.overrides.items():
            section[key] = str(value)

        model_options = self.model_options()
        train_options = self.train_options()
        data_options = self.data_options()
        known = {o.key for o in model_options + train_options + data_options}
        for key in section.keys():
            if key not in known:
                raise OptionError("unknown option", key)

        self.model = self.parse_section(section, model_options)
        self.train = self.parse_section(section, train_options)
        self.data = self.parse_section(section, data_options)

    @staticmethod
    def model_options() -> List[InputOption]:
        """Options describing the architecture"""
        return [
            InputOption("scales", [int], True, Input.all_positive),
            InputOption("modules", [int], True, Input.all_positive_or_zero),
            InputOption("channels", [int], True, Input.all_positive),
            InputOption("kind", str, False, one_of(["unconditional", "conditional"])),
            InputOption("image_channels", int, False, Input.positive),
            InputOption("image_size", int, False, Input.positive),
            InputOption("latent_channels", int, False, Input.positive),
            InputOption("z0", str, False, one_of(["fc", "spatial"])),
            InputOption("fc_modules", int, False, Input.positive_or_zero),
            InputOption("fc_units", int, False, Input.positive),
            InputOption("fc_latent", int, False, Input.positive),
            InputOption("likelihood", str, False, one_of(["bernoulli", "diag_gaussian", "integrated_logistic"])),
            InputOption("prior", str, False, one_of(["standard", "mixture"])),
            InputOption("mixture_components", int, False, Input.positive),
            InputOption("ar_head", bool, False),
            InputOption("ar_layers", int, False, Condition(lambda x: x >= 2, "must be at least 2")),
            InputOption("ar_features", int, False, Input.positive),
            InputOption("slope", float, False, Input.open_fraction),
            InputOption("refines", bool, False),
            InputOption("init", str, False, one_of(["random", "zero"])),
            InputOption("seed", int, False, Input.positive_or_zero),
        ]

    @staticmethod
    def train_options() -> List[InputOption]:
        """Options of the optimization loop"""
        return [
            InputOption("epochs", int, False, Input.positive),
            InputOption("batch_size", int, False, Input.positive),
            InputOption("lr", float, False, Input.positive),
            InputOption("beta1", float, False, Input.fraction),
            InputOption("beta2", float, False, Input.fraction),
            InputOption("eps", float, False, Input.positive),
            InputOption("clip", float, False, Input.positive),
            InputOption("mc_samples", int, False, Input.positive),
            InputOption("regularizer", bool, False),
            InputOption("reg_weight", float, False, Input.positive_or_zero),
            InputOption("reg_hard", bool, False),
            InputOption("entropy_weight", float, False, Input.positive_or_zero),
            InputOption("kl_warmup", int, False, Input.positive_or_zero),
            InputOption("eval_stride", int, False, Input.positive_or_zero),
            InputOption("eval_samples", int, False, Input.positive),
            InputOption("val_fraction", float, False, Input.fraction),
            InputOption("iwae_k", int, False, Input.positive),
            InputOption("checkpoint_stride", int, False, Input.positive_or_zero),
            InputOption("microbatches", int, False, Input.positive),
            InputOption("threads", int, False, Input.positive),
            InputOption("debug", bool, False),
            InputOption("checked", bool, False),
            InputOption("seed", int, False, Input.positive_or_zero),
        ]

    @staticmethod
    def data_options() -> List[InputOption]:
        """Options of the preprocessing and the conditioning masks"""
        return [
            InputOption("binarize", str, False, one_of(["none", "dynamic", "fixed_threshold"])),
            InputOption("dequantize", bool, False),
            InputOption("mask", str, False, one_of(["none", "quadrants", "occluders", "file"])),
            InputOption("quadrants", int, False, Condition(lambda x: 0 <= x <= 3, "must be 1, 2 or 3 (0 for random)")),
            InputOption("occluders", int, False, Input.positive),
            InputOption("occluder_size", int, False, Input.positive),
            InputOption("mask_file", str, False),
            InputOption("seed", int, False, Input.positive_or_zero),
        ]

    def options(self) -> Dict[str, OptionType]:
        """All parsed options in one dictionary"""
        return {**self.data, **self.train, **self.model}

    @staticmethod
    def parse_section(
        section: configparser.SectionProxy,
        options: List[InputOption],
    ) -> Dict[str, OptionType]:
        """Parse all options of a section

        :param section: section to parse
        :param options: list of InputOption to parse
        """
        parsed_options: Dict[str, OptionType] = {}
        for o in options:
            parsed_options[o.key] = o.parse(section)
        return parsed_options


def parse_text(text: str) -> Dict[str, OptionType]:
    """Parse configuration text (e.g. a checkpoint manifest) into one dictionary"""
    return Input(text=text).options()


def format_value(value: OptionType) -> str:
    """Render a value the way the parser reads it back"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(options: Dict[str, OptionType]) -> str:
    """Canonical configuration text: sorted `key = value` lines, None values skipped"""
    lines = [f"{key} = {format_value(value)}" for key, value in sorted(options.items()) if value is not None]
    return "\n".join(lines) + "\n"
