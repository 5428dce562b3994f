"""End-to-end run of the command-line pipeline on a synthetic collection.

The second run finds every stage in the content-addressed cache.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

from multimatch.synthetic import bent_cylinder_family, write_collection

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    write_collection(bent_cylinder_family(4, n_around=12, n_along=18), tmp / "meshes", tmp / "gt")
    cmd = [sys.executable, "-m", "multimatch", "run", str(tmp / "meshes"), str(tmp / "out"),
           "--gt-dir", str(tmp / "gt"), "--topology", "mst"]
    for attempt in ("first run", "second run"):
        print(f"--- {attempt}")
        subprocess.run(cmd, check=True)

    manifest = json.loads((tmp / "out" / "manifest.json").read_text())
    print("pairs:", manifest["pairs"]["unordered"], "unordered,", manifest["pairs"]["directed"], "directed")
    print("graph:", json.loads((tmp / "out" / "graph.json").read_text())["retained_edges"])
    print("outputs:", sorted(p.name for p in (tmp / "out").iterdir()))

    # invalid input exits with status 2
    bad = subprocess.run([sys.executable, "-m", "multimatch", "run", str(tmp / "missing"), str(tmp / "x")],
                         capture_output=True, text=True)
    print("missing collection ->", bad.returncode, bad.stderr.strip())
