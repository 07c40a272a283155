"""Run the example pipeline: cantor, modulus, tube and wiggle runs, then verify them."""
import sys
from pathlib import Path

from qcdistort.main import main as qcdistort_main

PIPELINE = ("cantor", "modulus", "tube", "wiggle", "verify")


def main() -> int:
    root = Path(__file__).parent
    examples = root / "config" / "examples"
    runs = root / "runs"
    runs.mkdir(parents=True, exist_ok=True)

    for command in PIPELINE:
        print(f"--- {command} ---")
        code = qcdistort_main([command, "--config", str(examples / f"{command}.json"), "--out", str(runs / command)])
        if code != 0:
            print(f"{command} exited with {code}, stopping", file=sys.stderr)
            return code
    print(f"Results in {runs}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
