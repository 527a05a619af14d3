"""Command line interface: train, evaluate, sample and impute with MatNets

Exit codes: 0 success, 1 configuration or usage errors, 2 data errors
(including missing input files), 3 numeric failures.
"""

import argparse
import logging
import os
from typing import Callable, Dict, List, Optional

import numpy as np

from matnet import __version__, actions, data, inputparser, training
from matnet import tensor as T
from matnet.archive import DataError
from matnet.distributions import bits_per_pixel
from matnet.helpers.misc import append_rows, backup_if_exists, initialize_file
from matnet.model import MatNet, ModelConfig, Observation, impute_two_stage, load_checkpoint
from matnet.rng import Rng

log = logging.getLogger("matnet")

DATA_STREAM = 21
SAMPLE_STREAM = 22


class UsageError(Exception):
    """Invalid combination of command line arguments"""


def main(argv: Optional[List[str]] = None) -> int:
    """Main function of the command line interface

    Does these things (in order):

        1. parse cli args
        2. get the configuration from file, checkpoint and flags
        3. run the subcommand
        4. map expected errors to exit codes

    :param argv: arguments, sys.argv[1:] if None
    :return exit_code: 0 on success
    """
    print(f"Starting matnet v{__version__}\n")
    args = build_parser().parse_args(argv)
    init_logger(args.log_level)
    return run_command(args.command, args)


def build_parser() -> argparse.ArgumentParser:
    cliargs = argparse.ArgumentParser(prog="matnet")
    cliargs.add_argument(
        "--log-level",
        type=str,
        default="warning",
        dest="log_level",
        help="Logging level, default 'warning'",
    )
    sub = cliargs.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model")
    train.add_argument("--config", required=True, help="configuration file")
    train.add_argument("--data", required=True, help="IDX images, binarized text, tensor archive or 'synthetic'")
    train.add_argument("--labels", help="IDX labels")
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    add_option_flags(train)

    evaluate = sub.add_parser("eval", help="importance weighted NLL of a checkpoint")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--labels")
    evaluate.add_argument("--out", default="eval.csv", help="result file, default 'eval.csv'")
    add_option_flags(evaluate)

    sample = sub.add_parser("sample", help="draw images from an unconditional model")
    sample.add_argument("--ckpt", required=True)
    sample.add_argument("--n", type=int, default=64, help="number of images, default 64")
    sample.add_argument("--cols", type=int, help="images per grid row")
    sample.add_argument("--mean", action="store_true", help="show output means instead of samples")
    sample.add_argument("--out", required=True, help="PGM/PPM grid file")
    add_option_flags(sample)

    impute = sub.add_parser("impute", help="fill masked pixels with a conditional model")
    impute.add_argument("--ckpt", required=True)
    impute.add_argument("--stages", type=int, choices=[1, 2], default=1)
    impute.add_argument("--ckpt2", help="refining second stage checkpoint for --stages 2")
    impute.add_argument("--data", required=True)
    impute.add_argument("--labels")
    impute.add_argument("--n", type=int, default=8, help="number of images, default 8")
    impute.add_argument("--mean", action="store_true", help="show output means instead of samples")
    impute.add_argument("--out", required=True, help="PGM/PPM grid of input, masked input and output")
    add_option_flags(impute)

    profile = sub.add_parser("kl-profile", help="merge and plot KL profiles")
    profile.add_argument("inputs", nargs="+", help="run directories or kl_profile csv files")
    profile.add_argument("--out", required=True, help="merged csv file")
    profile.add_argument("--plot", help="stacked area plot file")
    return cliargs


def option_keys() -> List[inputparser.InputOption]:
    """All configuration options, each key once"""
    seen: Dict[str, inputparser.InputOption] = {}
    for o in inputparser.Input.model_options() + inputparser.Input.train_options() + inputparser.Input.data_options():
        seen.setdefault(o.key, o)
    return list(seen.values())


def add_option_flags(parser: argparse.ArgumentParser) -> None:
    """Add a --key flag for every configuration key

    Values are kept as strings and parsed with the configuration rules.
    Boolean flags without a value mean true.
    """
    group = parser.add_argument_group("configuration overrides")
    for o in option_keys():
        names = [f"--{o.key}"]
        if "_" in o.key:
            names.append(f"--{o.key.replace('_', '-')}")
        if o.keytype == bool:
            group.add_argument(*names, dest=o.key, nargs="?", const="true", default=None)
        else:
            group.add_argument(*names, dest=o.key, default=None, metavar=o.type_name().upper())


def collect_overrides(args: argparse.Namespace) -> Dict[str, str]:
    return {o.key: getattr(args, o.key) for o in option_keys() if getattr(args, o.key, None) is not None}


def run_command(command: str, args: argparse.Namespace) -> int:
    """Run a subcommand and map expected errors to exit codes"""
    commands: Dict[str, Callable[[argparse.Namespace], None]] = {
        "train": cmd_train,
        "eval": cmd_eval,
        "sample": cmd_sample,
        "impute": cmd_impute,
        "kl-profile": cmd_kl_profile,
    }
    try:
        checked = getattr(args, "checked", None)
        with T.checked(checked is not None and checked.lower() in ("true", "1", "yes", "on")):
            commands[command](args)
    except (inputparser.OptionError, inputparser.SectionError) as e:
        log.error("Configuration: %s", e.args[0])
        return 1
    except UsageError as e:
        log.error("%s", e.args[0])
        return 1
    except FileNotFoundError as e:
        log.error("File '%s' could not be found", e.filename)
        return 2
    except (DataError, T.ShapeError) as e:
        log.error("Data: %s", e.args[0])
        return 2
    except T.NumericError as e:
        log.error("Numeric failure: %s", e.args[0])
        return 3
    except ValueError as e:
        log.error("Configuration: %s", e.args[0])
        return 1
    print("Finished without errors")
    return 0


def read_config(filename: str, overrides: Dict[str, str]) -> inputparser.Input:
    """Parse the configuration file with command line overrides

    :raises UsageError: if the file does not exist
    """
    try:
        return inputparser.Input(filename, overrides=overrides)
    except FileNotFoundError as e:
        raise UsageError(f"Input file '{filename}' could not be found") from e


def load_dataset(path: str, labels: Optional[str], options: Dict, seed: int) -> data.Dataset:
    """Read images and apply the configured preprocessing

    The format follows the path: 'synthetic' (or 'synthetic:n') for the
    built-in two-pattern images, .mtn tensor archives, .txt/.amat binarized
    text files and IDX files otherwise.
    """
    rng = Rng(seed, DATA_STREAM)
    if path.startswith("synthetic"):
        n = int(path.split(":")[1]) if ":" in path else 512
        d = data.synthetic_patterns(n, rng=rng)
    elif path.endswith(".mtn"):
        d = data.load_archive_images(path)
    elif path.endswith((".txt", ".amat")):
        d = data.load_binarized_text(path)
    else:
        d = data.load_idx(path, labels)
    mode = options.get("binarize") or "none"
    if mode != "none":
        d = data.binarize(d, mode, rng)
    if options.get("dequantize"):
        d = data.dequantize(d, rng)
    print(f"Read {len(d)} images of shape {d.shape} from '{path}'\n")
    return d


def check_dequantize(options: Dict, like: str) -> None:
    """Reject dequantized data for the discrete integrated logistic

    Dequantized values (255 v + u) / 256 do not fall into the bins of width 1/255
    centred on v / 255 that the integrated logistic scores.

    :raises UsageError: if both are requested
    """
    if options.get("dequantize") and like == "integrated_logistic":
        raise UsageError("dequantize is not possible with the integrated_logistic likelihood, it scores 8 bit values")


def effective_options(config: inputparser.Input, model_cfg: ModelConfig, train_cfg: training.TrainConfig) -> Dict:
    """All options with defaults filled in"""
    options = {k: v for k, v in config.data.items() if v is not None}
    options.update(train_cfg.options())
    options.update(model_cfg.options())
    return options


def cmd_train(args: argparse.Namespace) -> None:
    """Train a model and write the run directory"""
    config = read_config(args.config, collect_overrides(args))
    model_cfg = ModelConfig.from_options(config.model)
    train_cfg = training.TrainConfig.from_options(config.train)
    mask_spec = data.MaskSpec.from_options(config.data)
    if model_cfg.conditional and mask_spec is None:
        raise UsageError("Conditional models need a 'mask' option")
    check_dequantize(config.data, model_cfg.likelihood)

    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.resume:
        raise UsageError(f"Run directory '{out}' is not empty, use --resume to continue it")
    os.makedirs(out, exist_ok=True)
    config_text = inputparser.to_text(effective_options(config, model_cfg, train_cfg))
    if not args.resume:
        with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as f:
            f.write(config_text)

    d = load_dataset(args.data, args.labels, config.data, train_cfg.seed)
    net = MatNet(model_cfg)
    print(f"Set up model with {len(net.metas)} meta-modules, {net.depth + 1} latent layers")
    print(f"and {net.store.count()} parameters\n")
    result = training.train(net, d, train_cfg, None, mask_spec, out, config_text, args.resume)
    if result.validation:
        print(f"Final validation bound: {result.validation[-1][1]:.4f} nats")


def cmd_eval(args: argparse.Namespace) -> None:
    """Importance weighted NLL of a checkpoint on a dataset"""
    net, options, _ = load_checkpoint(args.ckpt, collect_overrides(args))
    train_cfg = training.TrainConfig.from_options(options)
    check_dequantize(options, net.config.likelihood)
    d = load_dataset(args.data, args.labels, options, train_cfg.seed)
    mask_spec = data.MaskSpec.from_options(options)
    k = train_cfg.iwae_k
    nll = training.validation_nll(net, d, k, train_cfg.seed, mask_spec, train_cfg.batch_size)
    mean = float(np.mean(nll))
    bpp = bits_per_pixel(mean, net.config.num_subpixels, actions.eval_action.is_discrete(net))
    print(f"NLL ({k} importance samples, {len(d)} images): {mean:.4f} nats")
    print(f"Bits per sub-pixel: {bpp:.4f}")
    initialize_file(args.out, ["images", "k", "nll", "bits_per_subpixel"])
    append_rows(args.out, [[len(d), k, mean, bpp]])


def cmd_sample(args: argparse.Namespace) -> None:
    """Grid of images drawn from an unconditional model"""
    net, options, _ = load_checkpoint(args.ckpt, collect_overrides(args))
    if net.conditional:
        raise UsageError("Conditional models need known pixels, use 'impute'")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    rng = Rng(options["seed"] or 0, SAMPLE_STREAM)
    x = np.clip(net.generate(args.n, rng, use_mean=args.mean), 0, 1)
    backup_if_exists(args.out)
    data.emit_grid(x, data.grid_layout(args.n, args.cols), args.out)
    print(f"Wrote {args.n} samples to '{args.out}'")


def cmd_impute(args: argparse.Namespace) -> None:
    """Grid with rows of input, masked input and imputed image"""
    overrides = collect_overrides(args)
    net, options, _ = load_checkpoint(args.ckpt, overrides)
    if not net.conditional:
        raise UsageError("Imputation needs a conditional model")
    stage2: Optional[MatNet] = None
    if args.stages == 2:
        if not args.ckpt2:
            raise UsageError("--stages 2 needs a second checkpoint (--ckpt2)")
        stage2, _, _ = load_checkpoint(args.ckpt2, overrides)
    mask_spec = data.MaskSpec.from_options(options)
    if mask_spec is None:
        raise UsageError("Imputation needs a mask, set --mask")
    seed = options["seed"] or 0
    d = load_dataset(args.data, args.labels, options, seed)
    x = d.epoch_view(0)[: args.n]
    mask = data.make_mask(mask_spec, x.shape, Rng(seed, actions.eval_action.EVAL_MASK_STREAM))
    obs = Observation(x, mask)
    rng = Rng(seed, SAMPLE_STREAM)
    if stage2 is not None:
        out = impute_two_stage(net, stage2, obs, rng, args.mean)
    else:
        out = net.generate(len(obs), rng, obs, args.mean)
    out = np.clip(out, 0, 1)
    masked = x * mask + 0.5 * (1 - mask)
    rows = np.stack([x, masked, out], axis=1).reshape((-1,) + x.shape[1:])
    backup_if_exists(args.out)
    data.emit_grid(rows, (len(x), 3), args.out)
    print(f"Wrote {len(x)} imputations to '{args.out}'")


def cmd_kl_profile(args: argparse.Namespace) -> None:
    """Merge KL profiles of several runs, write and optionally plot them"""
    merged: Optional[training.KlProfile] = None
    for path in args.inputs:
        if os.path.isdir(path):
            path = os.path.join(path, "kl_profile.csv")
        profile = actions.kl_profile.read_kl_profile(path)
        if merged is None:
            merged = profile
        else:
            merged.merge(profile)
    if merged is None or not len(merged):
        raise DataError("The KL profiles contain no rows")
    training.kl_profile_export(merged, args.out)
    print(f"Wrote {len(merged)} rows to '{args.out}'")
    if args.plot:
        merged.plot(args.plot)


def init_logger(level_str: str) -> logging.Logger:
    """Set up logger with specified level

    :param level_str: string with the level
    """
    levels = {
        "critical": logging.CRITICAL,
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "warning": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    log_level = levels.get(level_str.lower())

    logger = logging.getLogger("matnet")
    fmt = "%(asctime)s - %(name)s - %(levelname)s: %(message)s"
    datefmt = "%Y-%m-%d %H:%M:%S"
    logging.basicConfig(level=log_level, format=fmt, datefmt=datefmt)

    return logger
