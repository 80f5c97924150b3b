#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ecotta/rng.hpp"
#include "ecotta/tensor.hpp"

namespace ecotta::stream {

//==========================================================================
// datasets
//==========================================================================

// Class-conditional procedural images: 3x32x32 floats clamped to [0,1].
struct Dataset {
    TensorF images;  // [N,3,32,32]
    std::vector<std::int64_t> labels;
    int classes = 10;

    std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

Dataset gen_source(std::uint64_t seed, std::int64_t n, int classes);

// Assemble a batch from dataset rows order[offset .. offset+count), indices
// taken modulo the dataset size.
TensorF gather_images(const Dataset& ds, const std::vector<std::int64_t>& order, std::int64_t offset,
                      std::int64_t count);
std::vector<std::int64_t> gather_labels(const Dataset& ds, const std::vector<std::int64_t>& order,
                                        std::int64_t offset, std::int64_t count);

// Flat binary container ("ECOSET1") for cross-run fixtures.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

//==========================================================================
// corruptions
//==========================================================================

enum class Corruption {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Contrast,
    Brightness,
    Pixelate,
    Quantize,
};

const char* to_string(Corruption c);
Corruption corruption_from_string(const std::string& s);
std::vector<Corruption> all_corruptions();

// Severity 0 is the identity (test hook); 1..5 index fixed parameter tables.
// Deterministic given the rng state.
void corrupt_image(float* pixels, std::int64_t ch, std::int64_t h, std::int64_t w, Corruption kind,
                   int severity, Rng& rng);

// Per-image rng is derived from (seed, image_tag) so results do not depend
// on batch boundaries.
TensorF corrupt_batch(const TensorF& images, Corruption kind, int severity, std::uint64_t seed,
                      std::int64_t first_image_tag);

//==========================================================================
// schedules
//==========================================================================

enum class ScheduleMode { Continual, LongTerm, Gradual };

struct Segment {
    Corruption kind;
    int severity;
    int n_batches;
};

struct StreamSchedule {
    ScheduleMode mode = ScheduleMode::Continual;
    int rounds = 1;
    std::vector<Segment> segments;
};

StreamSchedule make_schedule(ScheduleMode mode, const std::vector<Corruption>& kinds, int severity,
                             int batches_per_segment, int rounds);

struct Batch {
    TensorF images;
    std::vector<std::int64_t> labels;  // consumed only by evaluation code
    int segment_index = 0;
};

// Deterministic batch stream over a clean target pool: each segment draws
// by a seeded permutation (cycling) and applies its corruption.
class StreamIterator {
public:
    StreamIterator(const StreamSchedule& schedule, const Dataset& target_pool, std::int64_t batch_size,
                   std::uint64_t seed);

    std::optional<Batch> next();
    const StreamSchedule& schedule() const { return schedule_; }

private:
    StreamSchedule schedule_;
    const Dataset* pool_;
    std::int64_t batch_size_;
    std::uint64_t seed_;
    std::size_t segment_ = 0;
    int batch_in_segment_ = 0;
    std::vector<std::int64_t> order_;
    std::int64_t emitted_ = 0;  // global image counter, tags corruption rng
};

}  // namespace ecotta::stream
