#!/usr/bin/env python3
"""
Full reproduction driver.
Ingests a manifest (or the bundled synthetic cohort), runs the complete
leave-one-subject-out sweep with and without the spectral loss, then
emits the benchmark table at NFE 50 and 6.
"""

import subprocess
import sys
from pathlib import Path

import click

ROOT = Path(__file__).parent


def run_step(title, args):
    """Run one CLI subcommand in a child process and stop on failure"""
    print(title)
    result = subprocess.run([sys.executable, str(ROOT / "main.py"), *args])
    if result.returncode != 0:
        print(f"Error: step failed with exit code {result.returncode}")
        sys.exit(result.returncode)


@click.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Dataset manifest (default: the bundled synthetic cohort)")
@click.option("--out", "out_root", type=click.Path(file_okay=False, path_type=Path), default=Path("runs/reproduction"),
              show_default=True)
@click.option("--epochs", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--kernel-ablation", is_flag=True, help="Also train the all-3 fine-kernel variant")
def main(manifest, out_root, epochs, seed, kernel_ablation):
    """Main reproduction function"""
    print("PPG-to-respiration reproduction")
    print("=" * 50)

    if not (ROOT / "main.py").exists():
        print("Error: Please run this script from the project root directory")
        sys.exit(1)

    store = out_root / "store"
    source = ["--manifest", str(manifest)] if manifest else ["--synthetic", str(ROOT / "configs" / "synthetic_mini.yaml")]
    run_step("Ingesting recordings...", ["ingest", *source, "--out", str(store)])

    arms = {
        "spectral": [],
        "no_spectral": ["--no-spectral-loss"],
    }
    if kernel_ablation:
        arms["kernels_3"] = ["--kernels", "3,3,3,3,3,3"]

    for name, flags in arms.items():
        run_step(
            f"Training LOSO sweep ({name})...",
            ["train", "--store", str(store), "--subject", "all", "--epochs", str(epochs), "--seed", str(seed),
             "--out", str(out_root / name), *flags],
        )

    runs = [arg for name in arms for arg in ("--runs", str(out_root / name))]
    run_step(
        "Benchmarking...",
        ["benchmark", "--store", str(store), *runs, "--sampler", "ddim", "--nfe", "50", "--nfe", "6",
         "--seed", str(seed), "--out", str(out_root / "benchmark")],
    )
    print(f"Done. Results in {out_root}")


if __name__ == "__main__":
    main()
