#include "steerreg/metrics.hpp"
#include "steerreg/registration.hpp"
#include "steerreg/synth.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>

using namespace steerreg;
using namespace steerreg::synth;

namespace {

SyntheticSpec small_spec(std::uint64_t seed) {
    SyntheticSpec s;
    s.extent = 21;
    s.n_blobs = 4;
    s.n_labels = 5;
    s.seed = seed;
    return s;
}

double field_smoothness(const DisplacementField& f) {
    ad::Tape tape;
    return reg::smoothness_loss(tape.constant(to_tensor(f))).value()[0];
}

std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("steerreg_synth_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("zero amplitude leaves the moving image untouched") {
    SyntheticSpec s = small_spec(3);
    s.deform_amplitude = 0.0;
    const VolumePair p = generate_pair(s);
    CHECK(p.moving == p.fixed);
    CHECK(p.moving_labels == p.fixed_labels);
    CHECK(metrics::dice(p.fixed_labels, p.moving_labels).mean == 1.0);
}

TEST_CASE("generation is deterministic per seed") {
    const VolumePair a = generate_pair(small_spec(5)), b = generate_pair(small_spec(5)), c = generate_pair(small_spec(6));
    CHECK(a.fixed == b.fixed);
    CHECK(a.moving == b.moving);
    CHECK(a.fixed_labels == b.fixed_labels);
    CHECK(a.moving_labels == b.moving_labels);
    CHECK(*a.gt_field == *b.gt_field);
    CHECK_FALSE(a.fixed == c.fixed);
}

TEST_CASE("volumes are in range and labels are blob ownership") {
    const VolumePair p = generate_pair(small_spec(7));
    for (double v : p.fixed.data) CHECK((v >= 0.0 && v <= 1.0));
    for (double v : p.moving.data) CHECK((v >= 0.0 && v <= 1.0));
    std::set<int> labels(p.fixed_labels.data.begin(), p.fixed_labels.data.end());
    CHECK(labels.size() >= 2);
    CHECK(*labels.begin() >= 0);
    CHECK(*labels.rbegin() < 5);
}

TEST_CASE("unregistered Dice at the default toy settings is stable") {
    // 33^3, amplitude 3, sigma 4, 6 blobs, seeds 100..109.
    double mean = 0.0;
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        SyntheticSpec s;
        s.seed = seed;
        const VolumePair p = generate_pair(s);
        mean += metrics::dice(p.fixed_labels, p.moving_labels).mean / 10;
    }
    MESSAGE("unregistered mean Dice " << std::setprecision(12) << mean);
    CHECK(mean == doctest::Approx(0.781661834276).epsilon(1e-9));
}

TEST_CASE("smoother fields have smaller gradients") {
    const Extent e{21, 21, 21};
    const double s2 = field_smoothness(smooth_random_field(e, 3.0, 2.0, 9));
    const double s4 = field_smoothness(smooth_random_field(e, 3.0, 4.0, 9));
    const double s6 = field_smoothness(smooth_random_field(e, 3.0, 6.0, 9));
    CHECK(s2 > s4);
    CHECK(s4 > s6);

    const DisplacementField f = smooth_random_field(e, 2.5, 4.0, 10);
    double peak = 0.0;
    for (std::size_t v = 0; v < e.voxels(); ++v) {
        double n2 = 0.0;
        for (int c = 0; c < 3; ++c) n2 += f.component(c, v) * f.component(c, v);
        peak = std::max(peak, std::sqrt(n2));
    }
    CHECK(peak == doctest::Approx(2.5).epsilon(1e-9));
}

TEST_CASE("approximate inverse of the ground truth improves overlap") {
    for (double amplitude : {1.0, 3.0}) {
        SyntheticSpec s;
        s.seed = 2;
        s.deform_amplitude = amplitude;
        const VolumePair p = generate_pair(s);
        const double before = metrics::dice(p.fixed_labels, p.moving_labels).mean;
        const LabelVolume back = warp_labels(p.moving_labels, invert_field(*p.gt_field, 10));
        const double after = metrics::dice(p.fixed_labels, back).mean;
        CHECK(after > before);
    }
}

TEST_CASE("infeasible blob packing is reported") {
    SyntheticSpec s;
    s.extent = 9;
    s.n_blobs = 40;
    s.n_labels = 5;
    CHECK_THROWS(generate_pair(s));
    SyntheticSpec bad;
    bad.n_labels = 20;
    CHECK_THROWS(bad.validate());
    bad = SyntheticSpec{};
    bad.deform_amplitude = -1.0;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("volume files round-trip and reject corruption") {
    const auto dir = scratch("io");
    const VolumePair p = generate_pair(small_spec(12));
    save_volume(dir / "img.svol", p.moving);
    save_volume(dir / "lab.svol", p.moving_labels);
    save_volume(dir / "def.svol", *p.gt_field);
    CHECK(load_image(dir / "img.svol") == p.moving);
    CHECK(load_labels(dir / "lab.svol") == p.moving_labels);
    CHECK(load_field(dir / "def.svol") == *p.gt_field);
    CHECK_THROWS(load_labels(dir / "img.svol"));

    {
        std::ofstream f(dir / "bad.svol", std::ios::binary);
        f << "JUNKJUNKJUNKJUNK";
    }
    CHECK_THROWS_WITH(load_image(dir / "bad.svol"), doctest::Contains("not a SVOL file"));

    const auto size = std::filesystem::file_size(dir / "img.svol");
    std::filesystem::copy_file(dir / "img.svol", dir / "short.svol");
    std::filesystem::resize_file(dir / "short.svol", size - 16);
    CHECK_THROWS(load_image(dir / "short.svol"));
    std::filesystem::copy_file(dir / "img.svol", dir / "long.svol");
    {
        std::ofstream f(dir / "long.svol", std::ios::binary | std::ios::app);
        f << "12345678";
    }
    CHECK_THROWS(load_image(dir / "long.svol"));

    save_pair(dir / "pair", p);
    const VolumePair q = load_pair(dir / "pair");
    CHECK(q.fixed == p.fixed);
    CHECK(q.moving_labels == p.moving_labels);
    CHECK(*q.gt_field == *p.gt_field);
    std::filesystem::remove_all(dir);
}

TEST_CASE("dataset splits are nested and deterministic") {
    const Split all = dataset_split(16, 1.0, 4);
    CHECK(all.train.size() == 16);
    std::vector<std::size_t> sorted = all.train;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 16; ++i) CHECK(sorted[i] == i);

    CHECK(dataset_split(16, 0.5, 4).train == dataset_split(16, 0.5, 4).train);
    std::vector<std::size_t> previous = all.train;
    for (double f : {0.5, 0.25, 0.125}) {
        const Split s = dataset_split(16, f, 4);
        CHECK(s.train.size() == static_cast<std::size_t>(16 * f));
        for (std::size_t i : s.train) CHECK(std::find(previous.begin(), previous.end(), i) != previous.end());
        previous = s.train;
    }

    const Split held = dataset_split(20, 0.5, 4, 4);
    CHECK(held.test.size() == 4);
    CHECK(held.train.size() == 8);
    for (std::size_t i : held.test) CHECK(std::find(held.train.begin(), held.train.end(), i) == held.train.end());

    CHECK_THROWS(dataset_split(4, 0.125, 1));
    CHECK_THROWS(dataset_split(16, 0.3, 1));
}
