"""Step responses of the inner pressure loop for a few setpoints.

    python3 scripts/pid_step.py
"""
from softctl.actuation import PidGains, settling_metrics, step_response


def main():
    gains = PidGains()
    for start, target, duration in ((0.0, 10.0, 4.0), (20.0, 23.0, 4.0), (30.0, 27.0, 4.0), (0.0, 60.0, 10.0)):
        t, path = step_response(target, duration, gains, start=start)
        m = settling_metrics(t, path, start, target)
        print(f"{start:5.1f} -> {target:5.1f} kPa: overshoot {100 * m['overshoot']:.2f}%, "
              f"settling {m['settling_time']:.2f} s")


if __name__ == "__main__":
    main()
