from __future__ import annotations

from pathlib import Path

from dsp_sensitivity_analysis import DomainSensitivityAnalyzer, ModelSpec, SyntheticSpec
from dsp_sensitivity_analysis.domain_data import generate
from dsp_sensitivity_analysis.models import init_params


def main() -> None:
    repo_root = Path(__file__).resolve().parents[1]
    output_dir = repo_root / "demo" / "output"
    output_dir.mkdir(parents=True, exist_ok=True)

    domains = generate(
        SyntheticSpec(samples_per_domain=2000, spurious_scales=(1.0, 2.0, 4.0), seed=0)
    )
    spec = ModelSpec(layer_sizes=(domains[0].n_features, 8, 2), activation="tanh")
    analyzer = DomainSensitivityAnalyzer(spec, init_params(spec), domains)

    analyzer.export_csv(str(output_dir / "sensitivity.csv"))
    analyzer.export_markdown(str(output_dir / "sensitivity_segments.md"), mode="segment")
    analyzer.export_markdown(str(output_dir / "sensitivity_top.md"), mode="parameter", top=15)

    for flat, segment, local, cv in analyzer.top_parameters(5):
        print(f"{flat:4d}  {segment}[{local}]  c={cv:.4f}")
    print(f"Wrote sensitivity outputs to: {output_dir}")


if __name__ == "__main__":
    main()
