"""Write MANUAL (every subcommand's --help plus the config keys) and the help goldens.

    python scripts/make_manual.py            # MANUAL and tests/fixtures/help/*.txt
"""

import os
from pathlib import Path

os.environ["COLUMNS"] = "80"

from specfield import cli, trainer  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def help_texts():
    parser = cli.build_parser()
    texts = {"specfield": parser.format_help()}
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    for name, p in sub.choices.items():
        texts[name] = p.format_help()
    return texts


def manual(texts) -> str:
    parts = ["SPECFIELD MANUAL", "", "Exit codes: 0 ok, 2 user/config error, 3 numeric failure, 4 I/O error.",
             "Threads default to $SPECFIELD_THREADS, then the CPU count.", ""]
    for name, text in texts.items():
        parts += ["=" * 78, name, "=" * 78, text]
    parts += ["=" * 78, "config keys (train --config FILE, --set KEY=VALUE)", "=" * 78,
              trainer.format_config(trainer.TrainConfig())]
    for name, preset in trainer.PRESETS.items():
        parts.append(f"preset {name}: " + ", ".join(f"{k}={v}" for k, v in preset.items()))
    return "\n".join(parts) + "\n"


def main():
    texts = help_texts()
    gold = ROOT / "tests" / "fixtures" / "help"
    gold.mkdir(parents=True, exist_ok=True)
    for name, text in texts.items():
        (gold / f"{name}.txt").write_text(text)
    (ROOT / "MANUAL").write_text(manual(texts))
    print(f"wrote MANUAL and {len(texts)} help goldens")


if __name__ == "__main__":
    main()
