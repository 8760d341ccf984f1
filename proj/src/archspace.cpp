#include "xfernas/archspace.hpp"

#include <cstdio>
#include <random>
#include <sstream>

#include "xfernas/archspace_json.hpp"
#include "xfernas/errors.hpp"

namespace xfernas {

std::string_view operation_name(Operation op) {
  return kOperationNames[static_cast<std::size_t>(op)];
}

Operation operation_from_id(int id) {
  if (id < 0 || id >= kNumOperations) {
    throw FormatError("operation id out of range: " + std::to_string(id));
  }
  return static_cast<Operation>(id);
}

Operation operation_from_name(std::string_view name) {
  for (int i = 0; i < kNumOperations; ++i) {
    if (kOperationNames[i] == name) return static_cast<Operation>(i);
  }
  throw FormatError("unknown operation '" + std::string(name) + "'");
}

namespace {

void validate_cell(const Cell& cell, CellKind expected, int blocks) {
  const char* label = expected == CellKind::normal ? "normal" : "reduction";
  if (cell.kind != expected) {
    throw FormatError(std::string(label) + " cell has the wrong kind");
  }
  if (cell.num_blocks() != blocks) {
    throw FormatError(std::string(label) + " cell has " + std::to_string(cell.num_blocks()) +
                      " blocks, expected " + std::to_string(blocks));
  }
  for (int b = 1; b <= blocks; ++b) {
    const Block& blk = cell.blocks[b - 1];
    for (int in : {blk.input1, blk.input2}) {
      if (in < 0 || in >= b + 1) {
        throw FormatError(std::string(label) + " block " + std::to_string(b) +
                          " references illegal input " + std::to_string(in));
      }
    }
    if (operation_id(blk.op1) >= kNumOperations || operation_id(blk.op2) >= kNumOperations) {
      throw FormatError(std::string(label) + " block " + std::to_string(b) +
                        " has an invalid operation");
    }
  }
}

int uniform_int(std::mt19937_64& rng, int lo, int hi_inclusive) {
  return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

Cell sample_cell(std::mt19937_64& rng, CellKind kind, int blocks) {
  Cell cell{kind, {}};
  cell.blocks.reserve(blocks);
  for (int b = 1; b <= blocks; ++b) {
    Block blk;
    blk.input1 = uniform_int(rng, 0, b);
    blk.op1 = static_cast<Operation>(uniform_int(rng, 0, kNumOperations - 1));
    blk.input2 = uniform_int(rng, 0, b);
    blk.op2 = static_cast<Operation>(uniform_int(rng, 0, kNumOperations - 1));
    cell.blocks.push_back(blk);
  }
  return cell;
}

}  // namespace

void validate(const Genome& g) {
  const int blocks = g.normal.num_blocks();
  if (blocks < 1) throw FormatError("genome has no blocks");
  validate_cell(g.normal, CellKind::normal, blocks);
  validate_cell(g.reduction, CellKind::reduction, blocks);
}

bool is_valid(const Genome& g) {
  try {
    validate(g);
    return true;
  } catch (const FormatError&) {
    return false;
  }
}

Genome sample_genome(std::uint64_t seed, int blocks) {
  if (blocks < 1) throw ConfigError("sample_genome: B must be >= 1");
  std::mt19937_64 rng(seed);
  Genome g;
  g.normal = sample_cell(rng, CellKind::normal, blocks);
  g.reduction = sample_cell(rng, CellKind::reduction, blocks);
  return g;
}

std::set<int> loose_ends(const Cell& cell) {
  std::vector<bool> consumed(cell.blocks.size() + 2, false);
  for (const Block& blk : cell.blocks) {
    consumed[blk.input1] = true;
    consumed[blk.input2] = true;
  }
  std::set<int> loose;
  for (int node = 2; node < static_cast<int>(consumed.size()); ++node) {
    if (!consumed[node]) loose.insert(node);
  }
  return loose;
}

// ---------------------------------------------------------------------------

TokenRange legal_tokens(int blocks, int position) {
  const int within = position % (4 * blocks);
  const int block = within / 4 + 1;
  if (within % 2 == 0) return {0, block + 1};
  return {op_token_offset(blocks), op_token_offset(blocks) + kNumOperations};
}

TokenSeq tokenize(const Genome& g) {
  const int blocks = g.num_blocks();
  TokenSeq seq{blocks, {}};
  seq.tokens.reserve(sequence_length(blocks));
  const int offset = op_token_offset(blocks);
  for (const Cell* cell : {&g.normal, &g.reduction}) {
    for (const Block& blk : cell->blocks) {
      seq.tokens.push_back(blk.input1);
      seq.tokens.push_back(offset + operation_id(blk.op1));
      seq.tokens.push_back(blk.input2);
      seq.tokens.push_back(offset + operation_id(blk.op2));
    }
  }
  return seq;
}

Genome detokenize(const TokenSeq& seq) {
  const int blocks = seq.blocks;
  if (blocks < 1 || seq.length() != sequence_length(blocks)) {
    throw FormatError("token sequence length " + std::to_string(seq.length()) +
                      " does not match B=" + std::to_string(blocks));
  }
  for (int p = 0; p < seq.length(); ++p) {
    const TokenRange r = legal_tokens(blocks, p);
    const int t = seq.tokens[p];
    if (t < r.first || t >= r.last) {
      throw FormatError("illegal token " + std::to_string(t) + " at position " +
                        std::to_string(p));
    }
  }
  const int offset = op_token_offset(blocks);
  Genome g;
  int p = 0;
  for (Cell* cell : {&g.normal, &g.reduction}) {
    cell->blocks.resize(blocks);
    for (Block& blk : cell->blocks) {
      blk.input1 = seq.tokens[p++];
      blk.op1 = static_cast<Operation>(seq.tokens[p++] - offset);
      blk.input2 = seq.tokens[p++];
      blk.op2 = static_cast<Operation>(seq.tokens[p++] - offset);
    }
  }
  return g;
}

std::string fingerprint(const Genome& g) {
  // FNV-1a over the token sequence, prefixed by B so that differently sized
  // genomes never share a digest.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      h ^= (v >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  const TokenSeq seq = tokenize(g);
  mix(static_cast<std::uint32_t>(seq.blocks));
  for (int t : seq.tokens) mix(static_cast<std::uint32_t>(t));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------

namespace {

std::string node_name(int index) { return "node_" + std::to_string(index + 1); }

const char* dag_key(CellKind kind) { return kind == CellKind::normal ? "conv_dag" : "reduc_dag"; }

int parse_node_ref(const std::string& ref, const std::string& where) {
  constexpr std::string_view prefix = "node_";
  if (ref.rfind(prefix, 0) != 0 || ref.size() == prefix.size()) {
    throw FormatError(where + ": malformed node reference '" + ref + "'");
  }
  int k = 0;
  for (std::size_t i = prefix.size(); i < ref.size(); ++i) {
    if (ref[i] < '0' || ref[i] > '9' || k > 100000) {
      throw FormatError(where + ": malformed node reference '" + ref + "'");
    }
    k = k * 10 + (ref[i] - '0');
  }
  if (k < 1) throw FormatError(where + ": malformed node reference '" + ref + "'");
  return k - 1;
}

Cell cell_from_json(const nlohmann::json& dag, CellKind kind) {
  const std::string key = dag_key(kind);
  if (!dag.is_object()) throw FormatError(key + " must be an object");
  const int nodes = static_cast<int>(dag.size());
  if (nodes < 3) throw FormatError(key + " must contain the two inputs and at least one block");
  for (const auto& [name, _] : dag.items()) {
    const int idx = parse_node_ref(name, key);
    if (idx >= nodes) throw FormatError(key + ": node numbering is not contiguous at " + name);
  }
  Cell cell{kind, {}};
  for (int idx = 0; idx < nodes; ++idx) {
    const std::string name = node_name(idx);
    const std::string where = key + "/" + name;
    if (!dag.contains(name)) throw FormatError(where + ": missing node");
    const auto& entry = dag.at(name);
    if (!entry.is_array() || entry.size() != 5) {
      throw FormatError(where + ": expected [name, input1, input2, op1, op2]");
    }
    if (!entry[0].is_string() || entry[0].get<std::string>() != name) {
      throw FormatError(where + ": first element must repeat the node name");
    }
    if (idx < 2) {
      for (int i = 1; i < 5; ++i) {
        if (!entry[i].is_null()) throw FormatError(where + ": cell inputs must have null fields");
      }
      continue;
    }
    for (int i = 1; i < 5; ++i) {
      if (!entry[i].is_string()) throw FormatError(where + ": field " + std::to_string(i) + " must be a string");
    }
    Block blk;
    blk.input1 = parse_node_ref(entry[1].get<std::string>(), where);
    blk.input2 = parse_node_ref(entry[2].get<std::string>(), where);
    for (int in : {blk.input1, blk.input2}) {
      if (in >= idx) {
        throw FormatError(where + ": forward reference to " + node_name(in));
      }
    }
    try {
      blk.op1 = operation_from_name(entry[3].get<std::string>());
      blk.op2 = operation_from_name(entry[4].get<std::string>());
    } catch (const FormatError& e) {
      throw FormatError(where + ": " + e.what());
    }
    cell.blocks.push_back(blk);
  }
  return cell;
}

void write_cell(std::ostringstream& os, const Cell& cell) {
  os << "  \"" << dag_key(cell.kind) << "\": {\n";
  const int nodes = cell.num_blocks() + 2;
  for (int idx = 0; idx < nodes; ++idx) {
    const std::string name = node_name(idx);
    os << "    \"" << name << "\": [\"" << name << "\", ";
    if (idx < 2) {
      os << "null, null, null, null]";
    } else {
      const Block& blk = cell.blocks[idx - 2];
      os << '"' << node_name(blk.input1) << "\", \"" << node_name(blk.input2) << "\", \""
         << operation_name(blk.op1) << "\", \"" << operation_name(blk.op2) << "\"]";
    }
    os << (idx + 1 < nodes ? ",\n" : "\n");
  }
  os << "  }";
}

}  // namespace

nlohmann::json genome_to_json_value(const Genome& g) {
  nlohmann::json doc = nlohmann::json::object();
  for (const Cell* cell : {&g.normal, &g.reduction}) {
    nlohmann::json dag = nlohmann::json::object();
    for (int idx = 0; idx < cell->num_blocks() + 2; ++idx) {
      const std::string name = node_name(idx);
      if (idx < 2) {
        dag[name] = {name, nullptr, nullptr, nullptr, nullptr};
      } else {
        const Block& blk = cell->blocks[idx - 2];
        dag[name] = {name, node_name(blk.input1), node_name(blk.input2),
                     std::string(operation_name(blk.op1)), std::string(operation_name(blk.op2))};
      }
    }
    doc[dag_key(cell->kind)] = std::move(dag);
  }
  if (g.meta) {
    doc["meta"] = {{"B", g.meta->blocks}, {"N", g.meta->cells}, {"F", g.meta->filters}};
  }
  return doc;
}

Genome genome_from_json_value(const nlohmann::json& doc) {
  if (!doc.is_object()) throw FormatError("genome JSON must be an object");
  for (const char* key : {"conv_dag", "reduc_dag"}) {
    if (!doc.contains(key)) throw FormatError(std::string("genome JSON lacks \"") + key + "\"");
  }
  Genome g;
  g.normal = cell_from_json(doc.at("conv_dag"), CellKind::normal);
  g.reduction = cell_from_json(doc.at("reduc_dag"), CellKind::reduction);
  if (g.normal.num_blocks() != g.reduction.num_blocks()) {
    throw FormatError("conv_dag and reduc_dag have different block counts");
  }
  if (doc.contains("meta")) {
    const auto& m = doc.at("meta");
    try {
      g.meta = GenomeMeta{m.at("B").get<int>(), m.at("N").get<int>(), m.at("F").get<int>()};
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("meta: ") + e.what());
    }
  }
  validate(g);
  return g;
}

std::string genome_to_json(const Genome& g) {
  // Hand-formatted so that entries stay on one line, byte-matching the
  // published dag files; keys in sorted order.
  std::ostringstream os;
  os << "{\n";
  write_cell(os, g.normal);
  os << ",\n";
  if (g.meta) {
    os << "  \"meta\": {\"B\": " << g.meta->blocks << ", \"F\": " << g.meta->filters
       << ", \"N\": " << g.meta->cells << "},\n";
  }
  write_cell(os, g.reduction);
  os << "\n}\n";
  return os.str();
}

Genome genome_from_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("genome JSON does not parse: ") + e.what());
  }
  return genome_from_json_value(doc);
}

}  // namespace xfernas
