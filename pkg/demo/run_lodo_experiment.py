from __future__ import annotations

from pathlib import Path

from dsp_sensitivity_analysis.cli import main as cli_main


def main() -> None:
    """Generate data, train every leave-one-domain-out split and run the ablation."""
    repo_root = Path(__file__).resolve().parents[1]
    config = str(repo_root / "demo" / "experiment.yaml")
    output_root = str(repo_root / "demo" / "output" / "lodo")

    cli_main(["generate", "--config", config, "--out", output_root])
    for split in range(3):
        cli_main(["train", "--config", config, "--out", output_root, "--split", str(split)])
    cli_main(["ablate", "--config", config, "--out", output_root, "--seed", "0"])

    print(f"Wrote experiment outputs to: {output_root}")


if __name__ == "__main__":
    main()
