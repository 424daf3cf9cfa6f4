// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include "flexfed/eval/ledger.hpp"

#include <sstream>
#include <utility>

namespace flexfed::eval {

std::string_view direction_name(Direction d) { return d == Direction::Up ? "up" : "down"; }

void CommLedger::record(std::size_t round, Direction direction, std::size_t client_id, std::string group,
                        std::size_t params) {
    rows_.push_back({round, direction, client_id, std::move(group), params, kWireBytesPerParam * params});
}

std::string CommLedger::to_csv() const {
    std::ostringstream out;
    out << "round,direction,client_id,group,params,bytes\n";
    for (const auto& r : rows_) {
        out << r.round << ',' << direction_name(r.direction) << ',' << r.client_id << ','
            << r.group << ',' << r.params << ',' << r.bytes << '\n';
    }
    return out.str();
}

LedgerSummary ledger_summary(const CommLedger& ledger) {
    LedgerSummary s;
    for (const auto& r : ledger.rows()) {
        if (r.direction == Direction::Up) {
            s.up_params += r.params;
            s.up_bytes += r.bytes;
        } else {
            s.down_params += r.params;
            s.down_bytes += r.bytes;
        }
        s.params_by_group[r.group] += r.params;
    }
    return s;
}

double comm_ratio(const LedgerSummary& baseline, const LedgerSummary& flex) {
    if (flex.total_params() == 0) return 0.0;
    return static_cast<double>(baseline.total_params()) / static_cast<double>(flex.total_params());
}

}  // namespace flexfed::eval
