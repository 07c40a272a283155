import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from qcdistort import __version__
from qcdistort.config import Settings, get_settings
from qcdistort.exceptions import InputError, NonConvergenceError
from qcdistort.models.schemas import CONFIG_MODELS, RunConfigBase, RunManifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGENCE = 3


def _commands():
    from qcdistort.commands.cantor import cmd_cantor
    from qcdistort.commands.modulus import cmd_modulus
    from qcdistort.commands.tube import cmd_tube
    from qcdistort.commands.verify import cmd_verify
    from qcdistort.commands.wiggle import cmd_wiggle

    return {
        "cantor": cmd_cantor,
        "modulus": cmd_modulus,
        "tube": cmd_tube,
        "wiggle": cmd_wiggle,
        "verify": cmd_verify,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qcdistort", description="Quasiconformal dimension distortion lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(CONFIG_MODELS))
    parser.add_argument("--config", type=Path, default=None, help="JSON run config")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--log-level", default=None)
    return parser


def load_run_config(command: str, path: Optional[Path], seed: Optional[int], settings: Settings) -> RunConfigBase:
    """Validate a run config file, resolving file references against the config's directory."""
    data: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise InputError(f"Config file {path} does not exist") from e
        if not isinstance(data, dict):
            raise InputError(f"Config file {path} must hold a JSON object")
        base_dir = path.parent
    declared = data.setdefault("command", command)
    if declared != command:
        raise InputError(f"Config is for command {declared!r}, not {command!r}")
    data.setdefault("seed", settings.default_seed)
    if seed is not None:
        data["seed"] = seed

    if command == "modulus" and "family_file" in data:
        data["family_file"] = str(base_dir / data["family_file"])
    if command == "verify":
        data["runs"] = [str(base_dir / r) for r in data.get("runs", [])]
    return CONFIG_MODELS[command].model_validate(data)


def run(command: str, config: RunConfigBase, out_dir: Path, settings: Settings) -> RunManifest:
    return _commands()[command](config, out_dir, settings)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(level=(args.log_level or settings.log_level).upper())

    out_dir = args.out or Path(settings.output_root) / args.command
    try:
        config = load_run_config(args.command, args.config, args.seed, settings)
        manifest = run(args.command, config, out_dir, settings)
    except NonConvergenceError as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        for step in e.trace:
            print(f"  {step}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ValidationError, ValueError, OSError) as e:
        # pydantic ValidationError, InputError and JSON decode errors are all ValueErrors
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT

    failed = [name for name, status in manifest.checks.items() if status == "fail"]
    if failed:
        logger.warning(f"{args.command}: failed checks {failed}")
    for flag in manifest.flags:
        print(f"flag: {flag}", file=sys.stderr)
    print(f"{args.command}: {len(manifest.artifacts)} artifacts written to {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
