"""Minimal external generator honouring the file protocol.

``python -m aerialsynth.stub_generator REQUESTS RESULTS`` copies each bundle's
flattened canvas to the requested output path. Useful for smoke tests and as
a template for wrapping a real backend.
"""

import json
import shutil
import sys
from pathlib import Path


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    req_path, res_path = Path(argv[0]), Path(argv[1])
    rows = []
    for line in req_path.read_text().splitlines():
        if not line.strip():
            continue
        req = json.loads(line)
        manifest = Path(req["bundle_manifest"])
        doc = json.loads(manifest.read_text())
        out = Path(req["output_path"])
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(out.name + ".part")
        shutil.copyfile(manifest.parent / doc["flattened_canvas"], tmp)
        tmp.replace(out)
        rows.append({"patch_id": req["patch_id"], "status": "ok", "image_path": str(out)})
    res_path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
