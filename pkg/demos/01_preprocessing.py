#!/usr/bin/env python3
"""Walk a raw cohort CSV through parsing, filtering, imputation, and
normalization, printing what each step changes.

Uses a small synthetic cohort so the script is self-contained; point
parse_cohort at a real extract to watch the same steps on real data.
"""

import io

import numpy as np

from glyrl import synthgen
from glyrl.cohort import (
    FilterCriteria,
    annotate_diabetes,
    apply_normalization,
    filter_cohort,
    fit_normalization,
    impute_cohort,
    parse_cohort,
    split_patients,
)

COVARIATES = ["heart_rate", "mean_bp", "lactate", "creatinine"]


def main():
    csv_text, _ = synthgen.generate(
        synthgen.ladder_config(80, seed=1, missing_prob=0.08))
    series = parse_cohort(io.StringIO(csv_text), COVARIATES)
    print("parsed %d patients, %d hourly rows"
          % (len(series), sum(s.n_hours for s in series)))

    kept, exclusions = filter_cohort(series, FilterCriteria())
    print("\nfilter (age >= 18, SOFA >= 2, <= 10%% missing): kept %d"
          % len(kept))
    for reason, count in sorted(exclusions.items()):
        print("  excluded %-38s %d" % (reason, count))

    before = kept[0]
    missing = sum(v is None for h in before.hours for v in h.covariates)
    imputed, dropped = impute_cohort(kept, COVARIATES)
    after = imputed[0]
    print("\nimputation: patient %s had %d missing cells, now %d"
          % (before.patient_id, missing,
             sum(v is None for h in after.hours for v in h.covariates)))
    print("  hour 0 covariates before:",
          ["%.1f" % v if v is not None else "None"
           for v in before.hours[0].covariates])
    print("  hour 0 covariates after: ",
          ["%.1f" % v for v in after.hours[0].covariates])
    if dropped:
        print("  dropped %d patients with an all-missing covariate"
              % len(dropped))

    # the diabetic flag feeds the state vector, so set it before splitting
    imputed = annotate_diabetes(imputed)
    train, test = split_patients(imputed, test_fraction=0.2, seed=0)
    print("\nsplit: %d train / %d test, stratified on outcome" %
          (len(train), len(test)))
    print("  train mortality %.3f, test mortality %.3f"
          % (np.mean([not s.survived for s in train]),
             np.mean([not s.survived for s in test])))

    spec = fit_normalization(train, COVARIATES)
    normalized = [apply_normalization(s, spec) for s in train]
    stacked = np.vstack([n.states for n in normalized])
    print("\nnormalization fit on the training split only:")
    print("  state matrix %d hours x %d features, range [%.3f, %.3f]"
          % (stacked.shape[0], stacked.shape[1],
             stacked.min(), stacked.max()))
    for name, lo, hi in list(zip(spec.feature_names, spec.mins, spec.maxs))[-4:]:
        print("  %-12s train range [%8.2f, %8.2f] -> [0, 1]" % (name, lo, hi))


if __name__ == "__main__":
    main()
