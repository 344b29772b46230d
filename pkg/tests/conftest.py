import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parents[1]
if str(REPO / "src") not in sys.path:
    sys.path.insert(0, str(REPO / "src"))

from hiertax import taxonomy as tx  # noqa: E402

PULMONARY_TSV = REPO / "data" / "pulmonary_taxonomy.tsv"


@pytest.fixture(scope="session")
def pulmonary_text() -> str:
    return PULMONARY_TSV.read_text()


@pytest.fixture(scope="session")
def pulmonary(pulmonary_text) -> tx.Taxonomy:
    return tx.parse_taxonomy(pulmonary_text)


@pytest.fixture(scope="session")
def flat3() -> tx.Taxonomy:
    return tx.parse_taxonomy(
        "root\t-\tRoot\na\troot\tA\nb\troot\tB\nc\troot\tC\n"
    )
