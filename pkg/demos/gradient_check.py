"""Finite-difference verification of every layer's backward pass.

Each layer kind is checked in float64 against central differences with
step 1e-3.  The second run skews the convolution's analytic gradient by
1% to show that the check catches a broken backward pass.

    python3 demos/gradient_check.py
"""

from nodule3d import gradcheck


def report(errors):
    for name, err in errors.items():
        flag = "ok" if err < gradcheck.THRESHOLDS[name] else "FAIL"
        print(f"  {name:<12} {err:.2e}  (limit {gradcheck.THRESHOLDS[name]:.0e})  {flag}")


def main():
    for seed in (0, 1, 2):
        print(f"seed {seed}")
        report(gradcheck.run_gradcheck(seed))

    print("seed 0, convolution gradient skewed by 1%")
    errors = gradcheck.run_gradcheck(0, corrupt="conv3d")
    report(errors)
    print("overall:", "pass" if gradcheck.passed(errors) else "fail (as intended)")


if __name__ == "__main__":
    main()
