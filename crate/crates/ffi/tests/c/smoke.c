#include <stdio.h>
#include "fpg.h"

int main(void) {
    FpgMdp *mdp = NULL;
    FpgPolicy *target = NULL, *behavior = NULL;
    FpgDataset *ds = NULL;
    double est[64], exact[64], value = 0.0;
    size_t dims[3];

    if (fpg_mdp_builtin("grid:3x3", 6, 0, &mdp) != FPG_STATUS_OK) return 10;
    if (fpg_mdp_dims(mdp, dims) != FPG_STATUS_OK || dims[0] != 9 || dims[1] != 4) return 11;
    if (fpg_policy_target(mdp, 5.0, &target) != FPG_STATUS_OK) return 12;
    if (fpg_policy_epsilon_greedy(target, 0.3, &behavior) != FPG_STATUS_OK) return 13;
    if (fpg_dataset_simulate(mdp, behavior, 500, 7, &ds) != FPG_STATUS_OK) return 14;
    size_t m = fpg_policy_n_params(target);
    if (fpg_estimate(ds, target, behavior, mdp, FPG_METHOD_FPG, 1e-6, est, 64) != FPG_STATUS_OK) return 15;
    if (fpg_exact_gradient(mdp, target, &value, exact, 64) != FPG_STATUS_OK) return 16;
    if (fpg_estimate(ds, target, behavior, mdp, FPG_METHOD_FPG, 1e-6, est, 1) != FPG_STATUS_BUFFER_TOO_SMALL) return 17;
    if (fpg_last_error() == NULL) return 18;
    if (fpg_mdp_builtin("nowhere", 0, 0, &mdp) != FPG_STATUS_CONFIG) return 19;

    double num = 0.0, den = 0.0;
    for (size_t j = 0; j < m; j++) {
        num += (est[j] - exact[j]) * (est[j] - exact[j]);
        den += exact[j] * exact[j];
    }
    printf("m=%zu value=%.6f rel2=%.6f\n", m, value, num / den);
    fpg_dataset_free(ds);
    fpg_policy_free(behavior);
    fpg_policy_free(target);
    fpg_mdp_free(mdp);
    return num / den < 0.25 ? 0 : 20;
}
