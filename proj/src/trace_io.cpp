#include "vlmprobe/trace_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>

#include "vlmprobe/error.hpp"

namespace vlmprobe {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'A', 'T', 'R', 'C'};
constexpr double kRowDriftTolerance = 1e-4;

template <class U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    require(remaining() >= n, ErrorKind::Format, std::string("trace file truncated in ") + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

void put_values(std::string& out, const Matrix& m, TraceDtype dtype) {
  for (double v : m.data()) {
    if (dtype == TraceDtype::F64) {
      put_le(out, std::bit_cast<std::uint64_t>(v));
    } else {
      put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
}

void get_values(Reader& in, Matrix& m, TraceDtype dtype) {
  for (double& v : m.data()) {
    if (dtype == TraceDtype::F64) {
      v = std::bit_cast<double>(in.get_le<std::uint64_t>("payload"));
    } else {
      v = static_cast<double>(std::bit_cast<float>(in.get_le<std::uint32_t>("payload")));
    }
  }
}

json partition_json(const TokenPartition& p) {
  return json{{"system", p.system}, {"vision", p.vision}, {"text", p.text}, {"seq_len", p.seq_len}};
}

TokenPartition partition_from(const json& j) {
  TokenPartition p;
  p.system = j.at("system").get<IndexSet>();
  p.vision = j.at("vision").get<IndexSet>();
  p.text = j.at("text").get<IndexSet>();
  p.seq_len = j.at("seq_len").get<std::size_t>();
  p.canonicalize();
  return p;
}

std::size_t element_size(TraceDtype dtype) { return dtype == TraceDtype::F64 ? 8 : 4; }

std::size_t model_dim_of(const TraceBundle& b) {
  return b.hidden_states.empty() ? 0 : b.hidden_states.front().cols();
}

std::uint64_t payload_elements(const AttentionTrace& t, std::size_t hidden_layers,
                               std::size_t model_dim) {
  const std::uint64_t nq = t.query_count();
  const std::uint64_t per_head = nq * t.head_dim + t.seq_len * t.head_dim + nq * t.seq_len;
  return per_head * t.layers * t.heads +
         static_cast<std::uint64_t>(hidden_layers) * t.seq_len * model_dim;
}

void renormalize_rows(AttentionTrace& trace, std::size_t& counter) {
  for (HeadTrace& h : trace.head_traces) {
    for (std::size_t r = 0; r < h.attention.rows(); ++r) {
      auto row = h.attention.row(r);
      double sum = 0.0;
      for (double w : row) sum += w;
      if (std::abs(sum - 1.0) > kRowDriftTolerance && sum > 0.0) {
        for (double& w : row) w /= sum;
        ++counter;
      }
    }
  }
}

}  // namespace

std::string encode_trace(const TraceBundle& b, TraceDtype dtype) {
  const AttentionTrace& t = b.trace;
  t.validate();
  b.partition.validate();
  b.rope.validate();
  require(b.partition.seq_len == t.seq_len, ErrorKind::InvalidArgument,
          "partition seq_len differs from trace seq_len");
  require(b.rope.head_dim == t.head_dim, ErrorKind::InvalidArgument,
          "rope head_dim differs from trace head_dim");
  const std::size_t model_dim = model_dim_of(b);
  if (!b.hidden_states.empty()) {
    require(b.hidden_states.size() == t.layers + 1, ErrorKind::InvalidArgument,
            "hidden states must cover layers + 1 residual streams");
    for (const Matrix& m : b.hidden_states) {
      require(m.rows() == t.seq_len && m.cols() == model_dim, ErrorKind::InvalidArgument,
              "hidden state shape mismatch");
    }
  }

  json meta;
  meta["model"] = b.model_name;
  meta["layers"] = t.layers;
  meta["heads"] = t.heads;
  meta["head_dim"] = t.head_dim;
  meta["seq_len"] = t.seq_len;
  meta["rope_base"] = b.rope.base;
  meta["rotation_pairing"] = std::string(to_string(b.rope.pairing));
  meta["partition"] = partition_json(b.partition);
  meta["dtype"] = dtype == TraceDtype::F64 ? "f64" : "f32";
  meta["query_indices"] = t.query_indices;
  meta["query_positions"] = t.query_positions;
  meta["key_positions"] = t.key_positions;
  meta["hidden_states"] = b.hidden_states.empty()
                              ? json(nullptr)
                              : json{{"count", b.hidden_states.size()}, {"model_dim", model_dim}};
  const std::string meta_text = meta.dump();

  std::string payload;
  payload.reserve(payload_elements(t, b.hidden_states.size(), model_dim) * element_size(dtype));
  for (const HeadTrace& h : t.head_traces) {
    put_values(payload, h.queries, dtype);
    put_values(payload, h.keys, dtype);
    put_values(payload, h.attention, dtype);
  }
  for (const Matrix& m : b.hidden_states) put_values(payload, m, dtype);

  std::string out(kMagic, sizeof kMagic);
  put_le(out, kTraceFormatVersion);
  put_le(out, static_cast<std::uint64_t>(meta_text.size()));
  out += meta_text;
  put_le(out, static_cast<std::uint64_t>(payload.size()));
  out += payload;
  return out;
}

TraceBundle decode_trace(const std::string& bytes) {
  Reader in(bytes);
  require(in.remaining() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::Format,
          "bad magic: not an ATRC trace file");
  in.take(4, "magic");
  const auto version = in.get_le<std::uint32_t>("version");
  require(version == kTraceFormatVersion, ErrorKind::Format,
          "unsupported trace format version " + std::to_string(version) +
              " (this reader supports " + std::to_string(kTraceFormatVersion) + ")");
  const auto meta_len = in.get_le<std::uint64_t>("metadata length");
  require(meta_len <= in.remaining(), ErrorKind::Format, "metadata shorter than declared");
  json meta;
  try {
    meta = json::parse(in.take(meta_len, "metadata"));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed trace metadata: ") + e.what());
  }

  TraceBundle b;
  try {
    b.model_name = meta.value("model", std::string("unknown"));
    AttentionTrace& t = b.trace;
    t.layers = meta.at("layers").get<std::size_t>();
    t.heads = meta.at("heads").get<std::size_t>();
    t.head_dim = meta.at("head_dim").get<std::size_t>();
    t.seq_len = meta.at("seq_len").get<std::size_t>();
    t.query_indices = meta.at("query_indices").get<std::vector<std::size_t>>();
    t.query_positions = meta.at("query_positions").get<std::vector<double>>();
    t.key_positions = meta.at("key_positions").get<std::vector<double>>();
    b.rope.head_dim = t.head_dim;
    b.rope.base = meta.at("rope_base").get<double>();
    b.rope.pairing = parse_pairing(meta.at("rotation_pairing").get<std::string>());
    const std::string dtype = meta.at("dtype").get<std::string>();
    require(dtype == "f32" || dtype == "f64", ErrorKind::Format,
            "unknown payload dtype '" + dtype + "'; supported: f32, f64");
    b.dtype = dtype == "f64" ? TraceDtype::F64 : TraceDtype::F32;
    b.partition = partition_from(meta.at("partition"));
    const json& hs = meta.at("hidden_states");
    std::size_t hidden_count = 0;
    std::size_t model_dim = 0;
    if (!hs.is_null()) {
      hidden_count = hs.at("count").get<std::size_t>();
      model_dim = hs.at("model_dim").get<std::size_t>();
    }
    b.rope.validate();
    require(b.partition.seq_len == t.seq_len, ErrorKind::Format,
            "partition seq_len differs from trace seq_len");

    const std::uint64_t declared = in.get_le<std::uint64_t>("payload length");
    const std::uint64_t expected =
        payload_elements(t, hidden_count, model_dim) * element_size(b.dtype);
    require(declared == expected, ErrorKind::Format,
            "declared payload length " + std::to_string(declared) +
                " does not match metadata shapes (" + std::to_string(expected) + " bytes)");
    require(in.remaining() >= declared, ErrorKind::Format, "payload shorter than declared");

    const std::size_t nq = t.query_count();
    t.head_traces.resize(t.layers * t.heads);
    for (HeadTrace& h : t.head_traces) {
      h.queries = Matrix(nq, t.head_dim);
      h.keys = Matrix(t.seq_len, t.head_dim);
      h.attention = Matrix(nq, t.seq_len);
      get_values(in, h.queries, b.dtype);
      get_values(in, h.keys, b.dtype);
      get_values(in, h.attention, b.dtype);
    }
    b.hidden_states.assign(hidden_count, Matrix(t.seq_len, model_dim));
    for (Matrix& m : b.hidden_states) get_values(in, m, b.dtype);
    t.validate();
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("invalid trace metadata: ") + e.what());
  }
  renormalize_rows(b.trace, b.renormalized_rows);
  return b;
}

void write_trace(const TraceBundle& bundle, const std::filesystem::path& path, TraceDtype dtype) {
  const std::string bytes = encode_trace(bundle, dtype);
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  require(file.good(), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(file.good(), ErrorKind::Io, "failed writing " + path.string());
}

TraceBundle read_trace(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  require(file.good(), ErrorKind::Io, "cannot open trace " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
  return decode_trace(bytes);
}

}  // namespace vlmprobe
