"""Regenerates sample_library.json from the hand-authored poses below.

Each emotion gets one 2-second talking clip at 30 fps: a static expression
pose, decorative jaw/mouth motion, and one blink.
"""
import json
import math
import pathlib

CHANNELS = [
    "eyeBlinkLeft", "eyeLookDownLeft", "eyeLookInLeft", "eyeLookOutLeft", "eyeLookUpLeft",
    "eyeSquintLeft", "eyeWideLeft", "eyeBlinkRight", "eyeLookDownRight", "eyeLookInRight",
    "eyeLookOutRight", "eyeLookUpRight", "eyeSquintRight", "eyeWideRight", "jawForward",
    "jawLeft", "jawRight", "jawOpen", "mouthClose", "mouthFunnel", "mouthPucker", "mouthLeft",
    "mouthRight", "mouthSmileLeft", "mouthSmileRight", "mouthFrownLeft", "mouthFrownRight",
    "mouthDimpleLeft", "mouthDimpleRight", "mouthStretchLeft", "mouthStretchRight",
    "mouthRollLower", "mouthRollUpper", "mouthShrugLower", "mouthShrugUpper", "mouthPressLeft",
    "mouthPressRight", "mouthLowerDownLeft", "mouthLowerDownRight", "mouthUpperUpLeft",
    "mouthUpperUpRight", "browDownLeft", "browDownRight", "browInnerUp", "browOuterUpLeft",
    "browOuterUpRight", "cheekPuff", "cheekSquintLeft", "cheekSquintRight", "noseSneerLeft",
    "noseSneerRight", "tongueOut",
]

POSES = {
    "Neutral": {},
    "Happy": {
        "mouthSmileLeft": 0.75, "mouthSmileRight": 0.75, "cheekSquintLeft": 0.45,
        "cheekSquintRight": 0.45, "eyeSquintLeft": 0.3, "eyeSquintRight": 0.3,
        "mouthDimpleLeft": 0.3, "mouthDimpleRight": 0.3, "browOuterUpLeft": 0.15,
        "browOuterUpRight": 0.15,
    },
    "Sad": {
        "mouthFrownLeft": 0.6, "mouthFrownRight": 0.6, "browInnerUp": 0.7,
        "eyeLookDownLeft": 0.3, "eyeLookDownRight": 0.3, "mouthShrugLower": 0.3,
        "eyeBlinkLeft": 0.15, "eyeBlinkRight": 0.15,
    },
    "Angry": {
        "browDownLeft": 0.8, "browDownRight": 0.8, "eyeSquintLeft": 0.5, "eyeSquintRight": 0.5,
        "noseSneerLeft": 0.4, "noseSneerRight": 0.4, "mouthPressLeft": 0.4,
        "mouthPressRight": 0.4, "jawForward": 0.2,
    },
    "Surprised": {
        "eyeWideLeft": 0.8, "eyeWideRight": 0.8, "browInnerUp": 0.6, "browOuterUpLeft": 0.7,
        "browOuterUpRight": 0.7, "jawOpen": 0.35, "mouthFunnel": 0.2,
    },
    "Afraid": {
        "eyeWideLeft": 0.7, "eyeWideRight": 0.7, "browInnerUp": 0.8, "mouthStretchLeft": 0.5,
        "mouthStretchRight": 0.5, "mouthLowerDownLeft": 0.3, "mouthLowerDownRight": 0.3,
    },
    "Disgusted": {
        "noseSneerLeft": 0.7, "noseSneerRight": 0.6, "mouthUpperUpLeft": 0.5,
        "mouthUpperUpRight": 0.4, "browDownLeft": 0.4, "browDownRight": 0.4,
        "eyeSquintLeft": 0.35, "eyeSquintRight": 0.35, "mouthFrownLeft": 0.3,
    },
}

FPS = 30
FRAMES = 60


def frame(pose, i):
    w = {c: 0.0 for c in CHANNELS}
    w.update(pose)
    t = i / FPS
    # speech-like jaw motion, a few syllables per second
    talk = 0.5 + 0.5 * math.sin(2 * math.pi * 3.1 * t) * math.sin(2 * math.pi * 0.7 * t + 0.4)
    w["jawOpen"] = min(1.0, w["jawOpen"] + 0.25 * talk)
    w["mouthLowerDownLeft"] = min(1.0, w["mouthLowerDownLeft"] + 0.1 * talk)
    w["mouthLowerDownRight"] = min(1.0, w["mouthLowerDownRight"] + 0.1 * talk)
    w["mouthClose"] = 0.1 * (1 - talk)
    blink = max(0.0, 1 - abs(i - 40) / 3)
    w["eyeBlinkLeft"] = min(1.0, w["eyeBlinkLeft"] + blink)
    w["eyeBlinkRight"] = min(1.0, w["eyeBlinkRight"] + blink)
    return [round(w[c], 3) for c in CHANNELS]


def main():
    lib = {
        "fps": FPS,
        "channels": CHANNELS,
        "clips": [
            {"clip_id": f"{name.lower()}-talk-1", "emotion": name,
             "frames": [frame(pose, i) for i in range(FRAMES)]}
            for name, pose in POSES.items()
        ],
    }
    out = pathlib.Path(__file__).with_name("sample_library.json")
    out.write_text(json.dumps(lib, separators=(",", ":")) + "\n")


if __name__ == "__main__":
    main()
