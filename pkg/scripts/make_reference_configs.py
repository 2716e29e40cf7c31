#!/usr/bin/env python3
"""Serialize the reference hand, arm, and retargeting setup into configs/."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from linkhand.armik import ArmIKConfig, REFERENCE_ARM_HOME, reference_arm_model
from linkhand.config import (SessionConfig, save_arm_ik_config,
                             save_arm_model, save_hand_geometry,
                             save_retarget_config, save_session_config)
from linkhand.reference import build_hand_geometry
from linkhand.retarget import RetargetConfig, default_keyvector_spec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join(
        os.path.dirname(__file__), "..", "configs"))
    args = ap.parse_args()
    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)

    hand = build_hand_geometry()
    save_hand_geometry(hand, os.path.join(out, "reference_hand.json"))
    save_retarget_config(RetargetConfig.for_hand(hand),
                         default_keyvector_spec(),
                         os.path.join(out, "retarget.json"))
    save_arm_model(reference_arm_model(), os.path.join(out,
                                                       "reference_arm.json"))
    save_arm_ik_config(ArmIKConfig(), os.path.join(out, "arm_ik.json"))
    session = SessionConfig(
        glove_stream="streams/pinch_glove.jsonl",
        wrist_stream="streams/pinch_wrist.jsonl",
        hand_geometry="reference_hand.json",
        retarget_config="retarget.json",
        arm_model="reference_arm.json",
        arm_ik_config="arm_ik.json",
        arm_home_rad=REFERENCE_ARM_HOME,
    )
    save_session_config(session, os.path.join(out, "session_pinch.json"))
    print(f"wrote 5 config files to {out}")


if __name__ == "__main__":
    main()
