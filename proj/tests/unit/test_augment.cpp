// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include "doctest.h"
#include "obidiff/data/manifest.hpp"
#include "obidiff/eval/augment.hpp"
#include "support.hpp"

using namespace obidiff;
using namespace obidiff::eval;

namespace {

AugmentConfig small_config() {
    AugmentConfig c;
    c.scales = {1, 2};
    c.rare_keep = 2;
    c.classifier.resolution = 32;
    c.classifier.widths = {4, 8};
    c.train.epochs = 2;
    c.train.batch = 8;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("copy-style generator at scale 1 reproduces the duplicate arm") {
    testing::TempDir dir("augment");
    data::SynthConfig sc;
    sc.classes = 4;
    sc.per_class = 8;
    sc.resolution = 32;
    sc.seed = 6;
    const auto m = data::split_dataset(data::build_synthetic_dataset(sc, dir / "data"), 0.75, 6);

    const auto cfg = small_config();
    const auto r = augmentation_experiment(m, diffusion::copy_style_generator(), cfg);
    CHECK(r.rare_classes == std::vector<int>{2, 3});
    CHECK(r.rare_items == 4);
    REQUIRE(r.rows.size() == 5);
    CHECK(r.rows[0].scale == 0);
    CHECK(r.rows[0].arm == "none");
    CHECK(r.rows[1].arm == "duplicate");
    CHECK(r.rows[2].arm == "generated");
    CHECK(r.rows[1].scale == 1);
    CHECK(r.rows[2].scale == 1);
    CHECK(r.rows[1].acc.acc1 == r.rows[2].acc.acc1);
    CHECK(r.rows[1].acc.acc3 == r.rows[2].acc.acc3);
    CHECK(r.rows[1].acc.acc5 == r.rows[2].acc.acc5);

    std::ostringstream csv;
    write_augment_csv(csv, r);
    std::istringstream in(csv.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "scale,arm,acc1,acc3,acc5");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 5);

    auto bad = cfg;
    bad.rare_classes = {42};
    CHECK_THROWS(augmentation_experiment(m, diffusion::copy_style_generator(), bad));
}
