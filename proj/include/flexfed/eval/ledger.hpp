// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0
//
// Communication ledger: one row per transfer between server and client.
// Payloads are counted at f32 wire width.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>


namespace flexfed::eval {

enum class Direction { Up, Down };

std::string_view direction_name(Direction d);

inline constexpr std::size_t kWireBytesPerParam = 4;

struct LedgerRow {
    std::size_t round = 0;
    Direction direction = Direction::Up;
    std::size_t client_id = 0;
    /// Parameter groups in the payload, joined by '+'.
    std::string group;
    std::size_t params = 0;
    std::size_t bytes = 0;
};

class CommLedger {
public:
    void record(std::size_t round, Direction direction, std::size_t client_id, std::string group, std::size_t params);

    [[nodiscard]] const std::vector<LedgerRow>& rows() const { return rows_; }
    [[nodiscard]] bool empty() const { return rows_.empty(); }

    /// "round,direction,client_id,group,params,bytes" plus one line per row.
    [[nodiscard]] std::string to_csv() const;

private:
    std::vector<LedgerRow> rows_;
};

struct LedgerSummary {
    std::size_t up_params = 0;
    std::size_t down_params = 0;
    std::size_t up_bytes = 0;
    std::size_t down_bytes = 0;
    /// Keyed by the row's group tag.
    std::map<std::string, std::size_t> params_by_group;

    [[nodiscard]] std::size_t total_params() const { return up_params + down_params; }
};

/// Totals per direction and group; an empty ledger gives zeros.
LedgerSummary ledger_summary(const CommLedger& ledger);

/// baseline / flex total parameters, or 0 when flex moved nothing.
double comm_ratio(const LedgerSummary& baseline, const LedgerSummary& flex);

}  // namespace flexfed::eval
