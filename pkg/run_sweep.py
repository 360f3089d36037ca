#!/usr/bin/env python3
"""
Launch one brushgym command per seed in parallel:
- each run gets its own output directory (<root>/seed_<n>)
- output is streamed with a colored [seed n] prefix
- Ctrl+C stops every run gracefully

    python run_sweep.py --seeds 0 1 2 3 4 --root runs/sweep -- train-rl --curriculum on
"""

import argparse
import signal
import subprocess
import sys
import threading
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict

REPO_DIR = Path(__file__).resolve().parent

# Color codes for output
RED = "\033[0;31m"
GREEN = "\033[0;32m"
BLUE = "\033[0;34m"
YELLOW = "\033[0;33m"
MAGENTA = "\033[0;35m"
NC = "\033[0m"  # No Color
PALETTE = [BLUE, GREEN, YELLOW, MAGENTA, RED]


class SweepRun(BaseModel):
    """One seed of a sweep and the process running it."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    seed: int
    output_dir: Path
    cmd: List[str]
    color: str = BLUE
    process: Optional[subprocess.Popen] = None
    relay: Optional[threading.Thread] = None
    returncode: Optional[int] = None

    @property
    def label(self) -> str:
        return f"seed {self.seed}"


def sweep_commands(seeds: List[int], root: Path, command: List[str], config: Optional[str]) -> List[dict]:
    base = [sys.executable, "-u", "main.py"]
    if config:
        base += ["--config", config]
    return [
        {"seed": seed,
         "cmd": base + ["--seed", str(seed), "--output-dir", str(root / f"seed_{seed}")] + command}
        for seed in seeds
    ]


class SweepManager:
    """Runs every seed of a sweep side by side and collects their exit codes."""

    def __init__(self, seeds: List[int], root: Path, command: List[str], config: Optional[str] = None,
                 cwd: Path = REPO_DIR):
        self.root = Path(root)
        self.cwd = cwd
        self.stopping = False
        self.runs = [
            SweepRun(seed=job["seed"], output_dir=self.root / f"seed_{job['seed']}", cmd=job["cmd"],
                     color=PALETTE[index % len(PALETTE)])
            for index, job in enumerate(sweep_commands(seeds, self.root, command, config))
        ]

    def _relay_output(self, run: SweepRun):
        try:
            for line in run.process.stdout:
                if self.stopping:
                    break
                line = line.rstrip()
                if line:
                    print(f"{run.color}[{run.label}] {line}{NC}", flush=True)
        except Exception as e:
            if not self.stopping:
                print(f"{RED}[{run.label}] Error reading output: {e}{NC}", flush=True)

    def launch(self, run: SweepRun) -> bool:
        print(f"{run.color}[{run.label}] Writing to {run.output_dir}{NC}")
        try:
            run.process = subprocess.Popen(run.cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                                           cwd=self.cwd, text=True, errors="replace", bufsize=1)
        except OSError as e:
            print(f"{RED}[{run.label}] Failed to start: {e}{NC}")
            return False
        run.relay = threading.Thread(target=self._relay_output, args=(run,), daemon=True)
        run.relay.start()
        return True

    def launch_all(self) -> bool:
        self.root.mkdir(parents=True, exist_ok=True)
        return all(self.launch(run) for run in self.runs)

    def wait_all(self) -> Dict[int, int]:
        """Exit code per seed; a seed that never started reports -1."""
        for run in self.runs:
            if run.process is None:
                run.returncode = -1
                continue
            run.returncode = run.process.wait()
            run.relay.join(timeout=1)
        return {run.seed: run.returncode for run in self.runs}

    def stop_all(self):
        if self.stopping:
            return
        self.stopping = True
        running = [run for run in self.runs if run.process is not None and run.process.poll() is None]
        print(f"\n{YELLOW}Stopping {len(running)} running seeds...{NC}")
        for run in running:
            try:
                run.process.terminate()
            except OSError as e:
                print(f"{RED}[{run.label}] Error terminating: {e}{NC}")
        for run in running:
            try:
                run.returncode = run.process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                print(f"{RED}[{run.label}] Force killing...{NC}")
                run.process.kill()
                run.returncode = run.process.wait()
        print(f"{GREEN}All runs stopped.{NC}")


def main(argv=None) -> int:
    load_dotenv()
    parser = argparse.ArgumentParser(description="Run one brushgym command per seed in parallel")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--root", type=Path, default=Path("runs/sweep"))
    parser.add_argument("--config")
    parser.add_argument("command", nargs=argparse.REMAINDER, help="brushgym command after --")
    args = parser.parse_args(argv)
    command = args.command[1:] if args.command[:1] == ["--"] else args.command
    if not command:
        parser.error("missing brushgym command, e.g. -- train-rl --curriculum on")

    config = str(Path(args.config).resolve()) if args.config else None
    sweep = SweepManager(args.seeds, args.root.resolve(), command, config)

    def signal_handler(signum, frame):
        print(f"\n{YELLOW}Received interrupt signal...{NC}")
        sweep.stop_all()
        sys.exit(130)

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    if not sweep.launch_all():
        sweep.stop_all()
        return 1
    codes = sweep.wait_all()
    failed = sorted(seed for seed, code in codes.items() if code != 0)
    if failed:
        print(f"{RED}Runs failed for seeds {failed}{NC}")
        return 1
    print(f"{GREEN}All {len(codes)} runs finished.{NC}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
