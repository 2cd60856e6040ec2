// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace cmir {

std::string Rng::state() const {
    std::ostringstream os;
    os.precision(17);
    os << m_engine << ' ' << m_normal;
    return os.str();
}

void Rng::set_state(const std::string& state) {
    std::istringstream is(state);
    is >> m_engine >> m_normal;
    if (!is) throw std::invalid_argument("rng: malformed state string");
}

}  // namespace cmir
