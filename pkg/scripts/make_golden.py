"""Regenerate the frozen golden trajectory used by the test suite."""
import shutil
import tempfile
from pathlib import Path

from feelsched.harness import load_spec, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    spec = load_spec(ROOT / "experiments" / "golden.toml")
    with tempfile.TemporaryDirectory() as tmp:
        res = run_experiment(spec, out=tmp)
        dest = ROOT / "tests" / "data" / "golden_metrics.csv"
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy(res.paths["metrics"], dest)
    print(f"wrote {dest}")


if __name__ == "__main__":
    main()
