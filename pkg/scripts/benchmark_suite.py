import subprocess as sp
from pathlib import Path

CONFSEARCH = ["python", "-m", "confsearch.cli"]

molecules = {
    "data/decane.spec": ["alkane", "--carbons", "10"],
    "data/star.spec": ["star", "--arms", "4", "--arm-carbons", "3"],
}


def prepare():
    for path, command in molecules.items():
        if not Path(path).exists():
            print(f"writing {path}")
            sp.run(CONFSEARCH + command + ["-o", path], capture_output=True, text=True, check=True)
        print(f"reference for {path}")
        sp.run(CONFSEARCH + ["reference", path], capture_output=True, text=True, check=True)


def decane():
    for method in ["vnd", "ls", "ls_vnd", "ptmc"]:
        print("decane", method)
        sp.run(
            CONFSEARCH + ["run", "data/decane.spec", "-c", f"config/decane_{method}.yaml"],
            capture_output=True,
            text=True,
            check=True,
        )


def neighbourhood_size():
    print("star, s = 30, 60, 90")
    sp.run(
        CONFSEARCH + ["sweep-s", "data/star.spec", "-c", "config/star_sweep.yaml", "--sizes", "30,60,90"],
        capture_output=True,
        text=True,
        check=True,
    )


if __name__ == "__main__":
    prepare()

    decane()

    neighbourhood_size()
