#pragma once

// Cell-based search space: two cells (normal, reduction) of B blocks each.
// A block sums two operations applied to two inputs; inputs are the two
// previous-cell outputs (node indices 0 and 1) or earlier blocks of the same
// cell (block b has node index b + 1).

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace xfernas {

inline constexpr int kNumOperations = 19;

enum class Operation : std::uint8_t {
  identity,
  conv_1x1,
  conv_3x3,
  conv_1x3_3x1,
  conv_1x7_7x1,
  max_pool_2x2,
  max_pool_3x3,
  max_pool_5x5,
  max_pool_7x7,
  min_pool_2x2,
  avg_pool_2x2,
  avg_pool_3x3,
  avg_pool_5x5,
  sep_conv_3x3,
  sep_conv_5x5,
  sep_conv_7x7,
  dil_sep_conv_3x3,
  dil_sep_conv_5x5,
  dil_sep_conv_7x7,
};

inline constexpr std::array<std::string_view, kNumOperations> kOperationNames = {
    "identity",         "conv 1x1",         "conv 3x3",        "conv 1x3+3x1",
    "conv 1x7+7x1",     "max_pool 2x2",     "max_pool 3x3",    "max_pool 5x5",
    "max_pool 7x7",     "min_pool 2x2",     "avg_pool 2x2",    "avg_pool 3x3",
    "avg_pool 5x5",     "sep_conv 3x3",     "sep_conv 5x5",    "sep_conv 7x7",
    "dil_sep_conv 3x3", "dil_sep_conv 5x5", "dil_sep_conv 7x7",
};

constexpr int operation_id(Operation op) { return static_cast<int>(op); }
std::string_view operation_name(Operation op);
Operation operation_from_id(int id);
// Throws FormatError for names outside the 19 canonical spellings.
Operation operation_from_name(std::string_view name);

enum class CellKind : std::uint8_t { normal, reduction };

struct Block {
  int input1 = 0;
  int input2 = 0;
  Operation op1 = Operation::identity;
  Operation op2 = Operation::identity;

  bool operator==(const Block&) const = default;
};

struct Cell {
  CellKind kind = CellKind::normal;
  std::vector<Block> blocks;

  int num_blocks() const { return static_cast<int>(blocks.size()); }
  bool operator==(const Cell&) const = default;
};

// Training-time hyperparameters carried alongside a genome; never part of
// equality or the fingerprint.
struct GenomeMeta {
  int blocks = 5;
  int cells = 6;
  int filters = 32;

  bool operator==(const GenomeMeta&) const = default;
};

struct Genome {
  Cell normal{CellKind::normal, {}};
  Cell reduction{CellKind::reduction, {}};
  std::optional<GenomeMeta> meta;

  int num_blocks() const { return normal.num_blocks(); }

  bool operator==(const Genome& other) const {
    return normal == other.normal && reduction == other.reduction;
  }
};

// Throws ConfigError/FormatError describing the first violated invariant.
void validate(const Genome& g);
bool is_valid(const Genome& g);

// Uniform sampling over the legal space; deterministic in seed.
Genome sample_genome(std::uint64_t seed, int blocks);

// Block node indices that no block of the cell consumes.
std::set<int> loose_ends(const Cell& cell);

// ---------------------------------------------------------------------------
// Token encoding. Per block: input1, op1, input2, op2. Input tokens carry the
// node index directly; op tokens are offset by B + 1. Normal cell first.

struct TokenSeq {
  int blocks = 5;
  std::vector<int> tokens;

  int vocab_size() const { return blocks + 1 + kNumOperations; }
  int length() const { return static_cast<int>(tokens.size()); }
  bool operator==(const TokenSeq&) const = default;
};

constexpr int sequence_length(int blocks) { return 2 * blocks * 4; }
constexpr int vocab_size(int blocks) { return blocks + 1 + kNumOperations; }
constexpr int op_token_offset(int blocks) { return blocks + 1; }

// Legal token range [first, last) at position p of a B-block sequence.
struct TokenRange {
  int first = 0;
  int last = 0;
};
TokenRange legal_tokens(int blocks, int position);

TokenSeq tokenize(const Genome& g);
// Throws FormatError on illegal tokens or a length that is not 8·B.
Genome detokenize(const TokenSeq& seq);

// 16 hex digits; a pure function of the token sequence.
std::string fingerprint(const Genome& g);

// ---------------------------------------------------------------------------
// JSON in the NAO dag layout: {"conv_dag": {...}, "reduc_dag": {...}} with
// node_1/node_2 as cell inputs and entries [name, in1, in2, op1, op2].

std::string genome_to_json(const Genome& g);
Genome genome_from_json(std::string_view text);

}  // namespace xfernas
