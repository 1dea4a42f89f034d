import json
import pathlib
from typing import Any


def get_output_path(output_dir: pathlib.Path, relative_path: str | pathlib.Path) -> pathlib.Path:
    output_path = output_dir / relative_path
    output_path.parent.mkdir(parents=True, exist_ok=True)

    return output_path


def write_json(path: pathlib.Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def read_json(path: pathlib.Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def append_jsonl(path: pathlib.Path, record: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)

    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True, default=str) + "\n")
