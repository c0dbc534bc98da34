"""Rewrite tests/fixtures/golden/*.json from the report corpus.

Only run after a deliberate grammar change; review the diff before committing.
"""

import json
from pathlib import Path

from hipath.report import Vocabulary, parse_outcome

ROOT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main() -> None:
    vocab = Vocabulary.load(ROOT / "vocab.json")
    for path in sorted((ROOT / "reports").glob("*.txt")):
        text = parse_outcome(path.read_text(), vocab)
        (ROOT / "golden" / f"{path.stem}.json").write_text(text)
        print(path.stem, json.loads(text).get("error", "ok"))


if __name__ == "__main__":
    main()
