from app.schemas.models import DatasetKind, ModelKind
from app.services.baselines import TOPOLOGIES, build_model
from app.services.bench import report_params

# Allowed distance from the published complexity
SM_RNN_SPATIAL_SLACK = 10
STAND_IN_SLACK = 0.02

PAIRINGS = [(ModelKind.SM_RNN, DatasetKind.SPATIAL), (ModelKind.SM_RNN, DatasetKind.TEMPORAL), *TOPOLOGIES]
EXACT = {
    (ModelKind.SM_RNN, DatasetKind.TEMPORAL),
    (ModelKind.RNN, DatasetKind.TEMPORAL),
    (ModelKind.LSTM, DatasetKind.TEMPORAL),
}


def allowed_slack(kind: ModelKind, dataset: DatasetKind, published_total: int) -> float:
    if (kind, dataset) in EXACT:
        return 0
    if kind == ModelKind.SM_RNN:
        return SM_RNN_SPATIAL_SLACK
    return STAND_IN_SLACK * published_total


def verify_param_counts() -> bool:
    ok = True
    for kind, dataset in PAIRINGS:
        report = report_params(kind, dataset)
        instantiated = build_model(kind, dataset, seed=None).param_count()
        print(f"{kind.value:>6} / {dataset.value:<8} {report.expression}")

        if instantiated != report.total:
            print(f"❌ FAILURE: instantiated model holds {instantiated:,} parameters, arithmetic says {report.total:,}")
            ok = False
            continue
        deviation = abs(report.total - report.published_total)
        if deviation > allowed_slack(kind, dataset, report.published_total):
            print(f"❌ FAILURE: {report.total:,} vs published {report.published_total:,}")
            ok = False
        else:
            print(f"✅ SUCCESS: published {report.published_total:,} (deviation {deviation})")
    return ok


if __name__ == "__main__":
    raise SystemExit(0 if verify_param_counts() else 1)
