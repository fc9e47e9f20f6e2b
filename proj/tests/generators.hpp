#pragma once

// Seeded random protocol messages shared by the protocol tests and the
// acceptance run.

#include "convshard/protocol.hpp"
#include "convshard/rng.hpp"

namespace gen {

using namespace convshard;

inline Shape4 random_dims(Rng& rng, std::size_t maxSide) {
  auto side = [&] { return 1 + rng.next() % maxSide; };
  return {side(), side(), side(), side()};
}

template <typename Dense>
inline Dense random_dense(Rng& rng, std::size_t maxSide) {
  Dense d(random_dims(rng, maxSide));
  for (auto& v : d.values()) v = rng.normal(0.0, 1e3);
  return d;
}

inline Message random_message(Rng& rng) {
  switch (rng.next() % 7) {
    case 0: {
      msg::Hello h;
      h.protocolVersion = static_cast<std::uint8_t>(rng.next());
      h.deviceName.resize(rng.next() % 40);
      for (auto& c : h.deviceName) c = static_cast<char>(rng.next());
      return h;
    }
    case 1: {
      msg::BenchRequest b;
      b.spec.input = random_dims(rng, 16);
      b.spec.kernels = random_dims(rng, 16);
      b.spec.repetitions = static_cast<std::uint32_t>(rng.next());
      b.spec.warmups = static_cast<std::uint32_t>(rng.next());
      return b;
    }
    case 2: return msg::BenchReport{rng.normal(0.0, 100.0)};
    case 3: {
      msg::ConvTask t;
      t.layerOrdinal = static_cast<std::uint32_t>(rng.next());
      t.direction = static_cast<ConvDirection>(rng.next() % 3);
      if (rng.next() % 4) t.input = random_dense<Tensor4>(rng, 5);
      t.kernels = random_dense<KernelBank>(rng, 5);
      t.numMaps = static_cast<std::uint32_t>(t.kernels.shape().d0);
      if (rng.next() % 2) t.extra = random_dense<Tensor4>(rng, 5);
      return t;
    }
    case 4: {
      msg::ConvResult r;
      r.layerOrdinal = static_cast<std::uint32_t>(rng.next());
      r.direction = static_cast<ConvDirection>(rng.next() % 3);
      r.output = random_dense<Tensor4>(rng, 5);
      return r;
    }
    case 5: return msg::AllOk{};
    default: return msg::TrainOver{};
  }
}

}  // namespace gen
