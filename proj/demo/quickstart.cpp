// Fixed-point map: eigenvalues from a hand-picked dictionary and from a
// small learned model.

#include <iostream>

#include <lkis/dmd.hpp>
#include <lkis/dynamics.hpp>
#include <lkis/lkis_model.hpp>

int main()
{
    using namespace lkis;
    const auto spec = dynamics::fixed_point_map(0.9, 0.5);
    Vector lo(2), hi(2);
    lo << -5.0, -10.0;
    hi << 5.0, 10.0;
    const auto eps = dynamics::as_episodes(dynamics::simulate_episodes(spec, 150, 8, lo, hi, 0));

    const auto ed = dmd::extended_dmd(eps, dmd::fixed_point_dictionary());
    std::cout << "dictionary DMD: " << ed.eigenvalues().transpose() << "\n";

    Hyperparameters hp;
    hp.k = 3;
    hp.p = 4;
    hp.n = 4;
    hp.alpha = 0.1;
    TrainConfig cfg;
    cfg.max_epochs = 300;
    const auto tr = train(eps, hp, cfg);
    const auto lk = dmd::fit_model(tr.model, eps);
    std::cout << "learned DMD:    " << lk.eigenvalues().transpose() << "\n";
    std::cout << "expected:       1, 0.9, 0.81, 0.5\n";
}
