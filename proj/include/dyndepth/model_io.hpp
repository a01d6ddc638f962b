#pragma once

#include "dyndepth/backbone.hpp"
#include "dyndepth/checkpoint.hpp"
#include "dyndepth/controller.hpp"
#include "dyndepth/feature_extractor.hpp"
#include "dyndepth/predictor.hpp"

namespace dyndepth {

// Each component writes its tensors under its own prefix plus the config
// keys needed to rebuild the structure, so several fit in one checkpoint.

void store(Checkpoint& ckpt, const BackboneParams& params);
void store(Checkpoint& ckpt, const ExtractorParams& params);
void store(Checkpoint& ckpt, const PolicyParams& params);
void store(Checkpoint& ckpt, const GbtModel& model);
void store(Checkpoint& ckpt, const RidgeModel& model);

BackboneParams load_backbone(const Checkpoint& ckpt);
ExtractorParams load_extractor(const Checkpoint& ckpt);
PolicyParams load_policy(const Checkpoint& ckpt);
GbtModel load_gbt(const Checkpoint& ckpt);
RidgeModel load_ridge(const Checkpoint& ckpt);

}  // namespace dyndepth
