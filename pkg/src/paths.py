from pathlib import Path

ROOT_DIR = Path(__file__).parent.parent
SRC_DIR = ROOT_DIR / "src"
TEST_DIR = ROOT_DIR / "test"
RUNS_DIR = ROOT_DIR / "runs"
