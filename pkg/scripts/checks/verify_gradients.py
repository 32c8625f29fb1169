import sys
import os
# Add project root to PYTHONPATH
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))


import argparse
import logging
import numpy as np
from dotenv import load_dotenv

from src.config import parse_config
from src.datagen import generate_all
from src.gradcheck import check_step1, check_step2
from src.trainer import diit_step, mixed_for_period, train_source_track, warm_start

load_dotenv()
logging.basicConfig(level=os.getenv("DIIT_LOG_LEVEL", "INFO").upper())

TOLERANCE = 1e-4


def verify(config_path: str, seed: int, batch: int) -> bool:
    config = parse_config(config_path)
    datasets = generate_all(config.gen, config.feature_schema)
    track = train_source_track(config, seed, datasets, last_period=0)
    state = warm_start(None, 0, config, seed, first_plug=True)
    state.sources = track[0]

    index = np.arange(batch)
    target = datasets[(config.gen.target_domain, 0)].subset(index)
    mixed = mixed_for_period(state, config, datasets).subset(index)
    # fresh modules have all-zero biases, which puts dead ReLU rows exactly on a kink
    for _ in range(3):
        diit_step(state, target, mixed, config.hyper)

    step2 = check_step2(state, target, mixed, config.hyper)
    step1 = check_step1(state, mixed, config.hyper)
    print(f"step 2: max relative error {step2:.3e}")
    print(f"step 1: max relative error {step1:.3e}")
    return step2 < TOLERANCE and step1 < TOLERANCE


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Finite-difference check of both update steps")
    parser.add_argument("--config", default="configs/default.json")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--batch", type=int, default=16)
    args = parser.parse_args()
    ok = verify(args.config, args.seed, args.batch)
    print("OK" if ok else f"FAILED (tolerance {TOLERANCE})")
    sys.exit(0 if ok else 1)
