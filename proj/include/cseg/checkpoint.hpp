#pragma once

#include <string>
#include <vector>

#include "cseg/segnet.hpp"

namespace cseg {

// Checkpoint container: magic "CSCK", u32 version, u64 manifest length,
// manifest JSON (structure: kinds, widths, frozen flags), the parameter and
// buffer tensors in walk order, and a FNV-1a checksum footer over everything
// before it.

void save_encoder(const std::string& path, Encoder& enc);
Encoder load_encoder(const std::string& path);

void save_decoder(const std::string& path, Decoder& dec, const std::vector<int>& encoder_widths);
Decoder load_decoder(const std::string& path);

void save_aux(const std::string& path, AuxHeads& aux, const std::vector<int>& encoder_widths);
AuxHeads load_aux(const std::string& path);

}  // namespace cseg
