#include "kvcomm/config.hpp"

#include "kvcomm/error.hpp"

#include <cmath>
#include <string>

namespace kvcomm {

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ParseError("invalid model config: " + what); };
    if (num_layers < 1) fail("num_layers must be >= 1");
    if (num_heads < 1) fail("num_heads must be >= 1");
    if (head_dim < 2 || head_dim % 2 != 0) fail("head_dim must be even and >= 2");
    if (model_dim != num_heads * head_dim) fail("model_dim must equal num_heads * head_dim");
    if (ffn_dim < 1) fail("ffn_dim must be >= 1");
    if (vocab_size < kMinVocab) fail("vocab_size must be >= 258");
    if (!(rope_base > 0.0f) || !std::isfinite(rope_base)) fail("rope_base must be positive");
    if (!(weight_scale > 0.0f) || !std::isfinite(weight_scale)) fail("weight_scale must be positive");
    if (max_context < 1) fail("max_context must be >= 1");
}

} // namespace kvcomm
